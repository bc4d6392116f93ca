"""Model assembly, training loops, evaluation, checkpoints and metrics files."""
from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Rng
from .graphconv import GcnLayer, SgcnLayer
from .imagegraph import (PixelGraph, build_graph_batch, gather_from_grid, patch_masks,
                         sample_patches, scatter_to_grid)
from .imputation import KnnPool, MeanStats, knn_impute_batch, mean_impute, zero_mask_impute
from .nn import (Adam, BatchNorm, Dense, GlobalMeanPool, Layer, ReLU, SpatialMeanPool, masked_mse,
                 softmax_xent)
from .refconv import Conv2d, TransposedConv2d

BACKBONES = ("sgcn", "gcn", "cnn")
IMPUTERS = ("mask", "mean", "knn")
NUM_CLASSES = 10


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


LR_SCHEDULES = ("constant", "cosine")


def _check_schedule(name):
    if name not in LR_SCHEDULES:
        raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")


def learning_rate(cfg, step: int, total: int) -> float:
    """Step size for optimizer step ``step`` (0-based) of ``total``; cosine decays to zero."""
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))


def _steps_per_epoch(N: int, batch_size: int) -> int:
    return sum(1 for s in range(0, N, batch_size) if min(batch_size, N - s) >= 2)


@dataclass
class ClassifierConfig:
    backbone: str = "sgcn"
    imputer: str | None = None
    layers: int = 4
    width: int = 32
    filters: int = 4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-2
    lr_schedule: str = "cosine"
    mask_size: int = 13
    resample_masks: bool = True
    knn_k: int = 5
    knn_pool: int = 10000

    def validate(self):
        _check_schedule(self.lr_schedule)
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if (self.backbone == "cnn") != (self.imputer is not None):
            raise ConfigError("an imputer is required for, and only for, the cnn backbone")
        if self.imputer is not None and self.imputer not in IMPUTERS:
            raise ConfigError(f"imputer must be one of {IMPUTERS}")
        for name in ("layers", "width", "filters", "epochs", "batch_size", "mask_size", "knn_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        return self


@dataclass
class AutoencoderConfig:
    backbone: str = "sgcn"
    imputer: str | None = None
    encoder_widths: tuple = (16, 16, 32, 32, 32)
    filters: int = 4
    decoder_width: int = 8
    batchnorm: bool = True
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    mask_size: int = 13
    resample_masks: bool = True
    knn_k: int = 5
    knn_pool: int = 10000

    def validate(self):
        _check_schedule(self.lr_schedule)
        if self.backbone not in ("sgcn", "cnn"):
            raise ConfigError("autoencoder backbone must be sgcn or cnn")
        if (self.backbone == "cnn") != (self.imputer is not None):
            raise ConfigError("an imputer is required for, and only for, the cnn backbone")
        if self.imputer is not None and self.imputer not in IMPUTERS:
            raise ConfigError(f"imputer must be one of {IMPUTERS}")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ConfigError("encoder widths must be positive")
        for name in ("filters", "decoder_width", "epochs", "batch_size", "mask_size", "knn_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self


@dataclass
class Metrics:
    task: str
    rows: list = field(default_factory=list)  # (epoch, split, metric, value)
    wall_clock: float = 0.0

    def add(self, epoch, split, metric, value):
        self.rows.append((epoch, split, metric, float(value)))

    def last(self, split: str, metric: str) -> float:
        for e, s, m, v in reversed(self.rows):
            if s == split and m == metric:
                return v
        raise KeyError((split, metric))

    def series(self, split: str, metric: str) -> list[float]:
        return [v for e, s, m, v in self.rows if s == split and m == metric]


def write_metrics_csv(path, metrics: Metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in metrics.rows:
            w.writerow([epoch, split, metric, repr(float(value))])


def read_metrics_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["epoch", "split", "metric", "value"]:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [(r[0], r[1], r[2], float(r[3])) for r in rows[1:]]


# --------------------------------------------------------------------- inputs

class InputPipeline:
    """Turns (values, missing) batches into what a backbone consumes.

    Graph backbones get the pixel graph of the masked images; CNN backbones
    get the imputed tensor.  Imputers are fitted on the training images only.
    """

    def __init__(self, backbone: str, imputer: str | None, train_values=None, train_missing=None,
                 knn_k: int = 5, knn_pool: int = 10000):
        self.backbone = backbone
        self.imputer = imputer
        self.stats = None
        self.pool = None
        if imputer in ("mean", "knn"):
            self.stats = MeanStats.fit(train_values, train_missing)
        if imputer == "knn":
            size = min(knn_pool, len(train_values))
            self.pool = KnnPool(train_values[:size], None, knn_k, self.stats)

    def in_channels(self, channels: int) -> int:
        return channels + 1 if self.imputer == "mask" else channels

    def __call__(self, values, missing, pool_index=None):
        if self.backbone in ("sgcn", "gcn"):
            return build_graph_batch(values, missing)
        if self.imputer == "mask":
            return zero_mask_impute(values, missing)
        if self.imputer == "mean":
            return mean_impute(self.stats, values, missing)
        exclude = None
        if pool_index is not None:
            exclude = np.where(np.asarray(pool_index) < len(self.pool), pool_index, -1)
        return knn_impute_batch(self.pool, values, missing, exclude=exclude)


# --------------------------------------------------------------------- models

class GraphClassifier(Layer):
    """Graph conv layers, each followed by batch norm and ReLU; global mean pool; dense head.

    Normalizing the linear conv output (rather than the rectified one) keeps
    nearly-dead channels from being blown up by a tiny batch variance, which
    otherwise makes eval-mode predictions swing between epochs.
    """

    def __init__(self, kind: str, in_channels: int, layers: int, width: int, filters: int, rng):
        self.kind = kind
        self.convs = []
        self.norms = []
        self.acts = []
        c = in_channels
        for _ in range(layers):
            if kind == "sgcn":
                self.convs.append(SgcnLayer(c, width, filters, "identity", rng=rng))
            else:
                self.convs.append(GcnLayer(c, width, "identity", rng=rng))
            self.norms.append(BatchNorm(width))
            self.acts.append(ReLU())
            c = width
        self.pool = GlobalMeanPool()
        self.head = Dense(width, NUM_CLASSES, "identity", rng=rng)

    def node_features(self, graph: PixelGraph) -> np.ndarray:
        h = graph.features
        for conv, bn, act in zip(self.convs, self.norms, self.acts):
            h = act.forward(bn.forward(conv.forward(graph, h)))
        return h

    def forward(self, graph: PixelGraph) -> np.ndarray:
        h = self.node_features(graph)
        return self.head.forward(self.pool.forward(h, graph.graph_id, graph.num_graphs))

    def backward(self, upstream):
        g = self.pool.backward(self.head.backward(upstream))
        for conv, bn, act in zip(reversed(self.convs), reversed(self.norms), reversed(self.acts)):
            g = conv.backward(bn.backward(act.backward(g)))
        return g

    def preactivations(self):
        return [a for layer in self.convs + self.acts for a in layer.preactivations()]


class CnnClassifier(Layer):
    """Same layout as :class:`GraphClassifier` with 3x3 image convolutions on the imputed tensor."""

    def __init__(self, in_channels: int, layers: int, width: int, rng):
        self.convs = []
        self.norms = []
        self.acts = []
        c = in_channels
        for _ in range(layers):
            self.convs.append(Conv2d(c, width, 1, "identity", rng=rng))
            self.norms.append(BatchNorm(width))
            self.acts.append(ReLU())
            c = width
        self.pool = SpatialMeanPool()
        self.head = Dense(width, NUM_CLASSES, "identity", rng=rng)

    def feature_map(self, x):
        for conv, bn, act in zip(self.convs, self.norms, self.acts):
            x = act.forward(bn.forward(conv.forward(x)))
        return x

    def forward(self, x):
        return self.head.forward(self.pool.forward(self.feature_map(x)))

    def backward(self, upstream):
        g = self.pool.backward(self.head.backward(upstream))
        for conv, bn, act in zip(reversed(self.convs), reversed(self.norms), reversed(self.acts)):
            g = conv.backward(bn.backward(act.backward(g)))
        return g

    def preactivations(self):
        return [a for layer in self.convs + self.acts for a in layer.preactivations()]


class Decoder(Layer):
    """28 -> 14 -> 7 -> 14 -> 28 conv / transposed-conv stack with a sigmoid output."""

    def __init__(self, in_channels: int, width: int, out_channels: int, rng):
        self.layers = [
            Conv2d(in_channels, width, 2, "relu", rng=rng),
            Conv2d(width, width, 2, "relu", rng=rng),
            TransposedConv2d(width, width, 2, "relu", rng=rng),
            TransposedConv2d(width, width, 2, "relu", rng=rng),
            Conv2d(width, out_channels, 1, "sigmoid", rng=rng),
        ]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def preactivations(self):
        return [a for layer in self.layers for a in layer.preactivations()]


class Autoencoder(Layer):
    """Encoder on the incomplete input, grid with a missing-pixel channel, conv decoder.

    The SGCN encoder runs on the pixel graph and its node embeddings are
    scattered back to the grid; the CNN encoder runs on the imputed tensor.
    Each encoder layer is conv, optional batch norm, then ReLU.
    """

    def __init__(self, kind: str, in_channels: int, out_channels: int, widths, filters: int,
                 decoder_width: int, batchnorm: bool, rng):
        self.kind = kind
        self.encoder = []
        self.norms = []
        self.acts = []
        c = in_channels
        for w in widths:
            if kind == "sgcn":
                self.encoder.append(SgcnLayer(c, w, filters, "identity", rng=rng))
            else:
                self.encoder.append(Conv2d(c, w, 1, "identity", rng=rng))
            self.norms.append(BatchNorm(w) if batchnorm else None)
            self.acts.append(ReLU())
            c = w
        self.width = c
        self.decoder = Decoder(c + 1, decoder_width, out_channels, rng)

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.encoder):
            yield from layer.named_parameters(f"{prefix}encoder.{i}.")
        for i, bn in enumerate(self.norms):
            if bn is not None:
                yield from bn.named_parameters(f"{prefix}norms.{i}.")
        yield from self.decoder.named_parameters(f"{prefix}decoder.")

    def _encode(self, inp):
        h = inp.features if self.kind == "sgcn" else inp
        for layer, bn, act in zip(self.encoder, self.norms, self.acts):
            h = layer.forward(inp, h) if self.kind == "sgcn" else layer.forward(h)
            h = act.forward(bn.forward(h) if bn is not None else h)
        return h

    def forward(self, inp, missing):
        self._inp = inp
        h = self._encode(inp)
        if self.kind == "sgcn":
            grid = scatter_to_grid(inp, h, with_mask_channel=True)
            if grid.ndim == 3:
                grid = grid[None]
        else:
            grid = np.concatenate([h, np.asarray(missing, dtype=np.float64)[..., None]], axis=-1)
        return self.decoder.forward(grid)

    def backward(self, upstream):
        g = self.decoder.backward(upstream)
        if self.kind == "sgcn":
            g = gather_from_grid(self._inp, g, self.width)
        else:
            g = g[..., :self.width]
        for layer, bn, act in zip(reversed(self.encoder), reversed(self.norms), reversed(self.acts)):
            g = act.backward(g)
            g = bn.backward(g) if bn is not None else g
            g = layer.backward(g)
        return g

    def preactivations(self):
        layers = self.encoder + self.acts
        return [a for layer in layers for a in layer.preactivations()] + self.decoder.preactivations()


def build_classifier(cfg: ClassifierConfig, channels: int = 1) -> Layer:
    cfg.validate()
    rng = Rng(cfg.seed).spawn(1)
    if cfg.backbone == "cnn":
        cin = channels + 1 if cfg.imputer == "mask" else channels
        return CnnClassifier(cin, cfg.layers, cfg.width, rng)
    return GraphClassifier(cfg.backbone, channels, cfg.layers, cfg.width, cfg.filters, rng)


def build_autoencoder(cfg: AutoencoderConfig, channels: int = 1) -> Autoencoder:
    cfg.validate()
    rng = Rng(cfg.seed).spawn(1)
    cin = channels + 1 if cfg.imputer == "mask" else channels
    return Autoencoder(cfg.backbone, cin, channels, tuple(cfg.encoder_widths), cfg.filters,
                       cfg.decoder_width, cfg.batchnorm, rng)


def parameter_count(model: Layer) -> int:
    return int(sum(p.value.size for p in model.parameters()))


# ------------------------------------------------------------------- training

def frozen_masks(rng: Rng, count: int, n: int, m: int, size: int):
    patches = sample_patches(rng, count, n, m, size)
    return patches, patch_masks(patches, n, m)


def _check_finite(loss: float, epoch: int, step: int):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {step}")


def _epoch_masks(cfg, rng: Rng, epoch: int, train_missing, n, m):
    if not cfg.resample_masks:
        return train_missing
    return frozen_masks(rng.spawn(1000 + epoch), len(train_missing), n, m, cfg.mask_size)[1]


def train_classifier(model: Layer, pipeline: InputPipeline, train_values, train_labels,
                     train_missing, cfg: ClassifierConfig, test=None, log=None) -> Metrics:
    """Minimize softmax cross-entropy with Adam.

    ``train_missing`` is the frozen training mask set (used as-is when
    ``cfg.resample_masks`` is false).  ``test`` = (values, labels, missing)
    is evaluated after every epoch.
    """
    start = time.perf_counter()
    metrics = Metrics("classify")
    rng = Rng(cfg.seed).spawn(2)
    opt = Adam(model.parameters(), lr=cfg.lr)
    N, n, m = train_missing.shape
    total_steps = cfg.epochs * _steps_per_epoch(N, cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        missing = _epoch_masks(cfg, rng, epoch, train_missing, n, m)
        perm = rng.spawn(epoch).permutation(N)
        losses, correct = [], 0
        for step, s in enumerate(range(0, N, cfg.batch_size)):
            idx = perm[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            inp = pipeline(train_values[idx], missing[idx], pool_index=idx)
            logits = model.forward(inp)
            loss, grad = softmax_xent(logits, train_labels[idx])
            _check_finite(loss, epoch, step)
            model.backward(grad)
            opt.lr = learning_rate(cfg, opt.t, total_steps)
            opt.step()
            losses.append(loss * len(idx))
            correct += int((logits.argmax(axis=1) == train_labels[idx]).sum())
        metrics.add(epoch, "train", "loss", sum(losses) / N)
        metrics.add(epoch, "train", "error", 1.0 - correct / N)
        if test is not None:
            res = evaluate_classifier(model, pipeline, *test, batch_size=cfg.batch_size)
            metrics.add(epoch, "test", "error", res["error"])
            metrics.add(epoch, "test", "loss", res["loss"])
        if log:
            log(f"epoch {epoch}: " + ", ".join(f"{s}/{k}={v:.4f}" for e, s, k, v in metrics.rows if e == epoch))
    metrics.wall_clock = time.perf_counter() - start
    return metrics


def evaluate_classifier(model: Layer, pipeline: InputPipeline, values, labels, missing,
                        batch_size: int = 64) -> dict:
    model.eval()
    wrong, total_loss = 0, 0.0
    for s in range(0, len(labels), batch_size):
        sl = slice(s, s + batch_size)
        logits = model.forward(pipeline(values[sl], missing[sl]))
        loss, _ = softmax_xent(logits, labels[sl])
        total_loss += loss * len(labels[sl])
        wrong += int((logits.argmax(axis=1) != labels[sl]).sum())
    model.train()
    return {"error": wrong / len(labels), "loss": total_loss / len(labels)}


def train_autoencoder(model: Autoencoder, pipeline: InputPipeline, train_values, train_missing,
                      cfg: AutoencoderConfig, test=None, log=None) -> Metrics:
    """Minimize MSE over observed pixels only; ``test`` = (values, missing) with ground truth values."""
    start = time.perf_counter()
    metrics = Metrics("reconstruct")
    rng = Rng(cfg.seed).spawn(2)
    opt = Adam(model.parameters(), lr=cfg.lr)
    N, n, m = train_missing.shape
    total_steps = cfg.epochs * _steps_per_epoch(N, cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        missing = _epoch_masks(cfg, rng, epoch, train_missing, n, m)
        perm = rng.spawn(epoch).permutation(N)
        total = 0.0
        for step, s in enumerate(range(0, N, cfg.batch_size)):
            idx = perm[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            vals, mk = train_values[idx], missing[idx]
            observed_only = np.where(mk[..., None], 0.0, vals)
            out = model.forward(pipeline(observed_only, mk, pool_index=idx), mk)
            loss, grad = masked_mse(out, observed_only, mk, "outside")
            _check_finite(loss, epoch, step)
            model.backward(grad)
            opt.lr = learning_rate(cfg, opt.t, total_steps)
            opt.step()
            total += loss * len(idx)
        metrics.add(epoch, "train", "mse_outside", total / N)
        if test is not None:
            res = evaluate_autoencoder(model, pipeline, *test, batch_size=cfg.batch_size)
            metrics.add(epoch, "test", "mse_inside", res["mse_inside"])
            metrics.add(epoch, "test", "mse_outside", res["mse_outside"])
        if log:
            log(f"epoch {epoch}: " + ", ".join(f"{s}/{k}={v:.5f}" for e, s, k, v in metrics.rows if e == epoch))
    metrics.wall_clock = time.perf_counter() - start
    return metrics


def reconstruct(model: Autoencoder, pipeline: InputPipeline, values, missing, batch_size: int = 64):
    model.eval()
    outs = []
    for s in range(0, len(values), batch_size):
        sl = slice(s, s + batch_size)
        observed_only = np.where(missing[sl][..., None], 0.0, values[sl])
        outs.append(model.forward(pipeline(observed_only, missing[sl]), missing[sl]))
    model.train()
    return np.concatenate(outs)


def evaluate_autoencoder(model: Autoencoder, pipeline: InputPipeline, values, missing,
                         batch_size: int = 64) -> dict:
    """MSE inside the hole (against ground truth) and outside it, averaged over images."""
    out = reconstruct(model, pipeline, values, missing, batch_size)
    inside = masked_mse(out, values, missing, "inside")[0]
    outside = masked_mse(out, values, missing, "outside")[0]
    return {"mse_inside": inside, "mse_outside": outside}


# ----------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"GGNN"
CHECKPOINT_VERSION = 1


def model_state(model: Layer) -> dict:
    state = {name: p.value for name, p in model.named_parameters()}
    for name, buf in model.buffers():
        state[name] = buf
    return state


def save_checkpoint(path, model: Layer, meta: dict) -> None:
    """Layout: magic, u32 version, u32 meta length + JSON meta, u32 count, then per entry
    u32 name length, name, u32 ndim, u32 dims, little-endian float64 payload."""
    state = model_state(model)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw_name = name.encode()
            fh.write(struct.pack("<I", len(raw_name)) + raw_name)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(raw[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return meta, state


def load_state(model: Layer, state: dict) -> None:
    expected = model_state(model)
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"checkpoint lacks {sorted(missing)}")
    for name, arr in expected.items():
        if arr.shape != state[name].shape:
            raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model {arr.shape}")
        arr[...] = state[name]


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    if "encoder_widths" in d:
        d["encoder_widths"] = list(d["encoder_widths"])
    return d
