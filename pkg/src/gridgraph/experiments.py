"""Command line entry point: equiv-check, train, eval, export-recon, impute-eval, make-masks."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as gdata
from .data import Rng
from .equiv import compile_mask, corner_pair_layer, verify_equivalence
from .imagegraph import IncompleteImage, patch_masks, read_mask_file, write_mask_file
from .imputation import KnnPool, MeanStats, knn_impute_batch, mean_impute
from .refconv import ConvMask
from .train import (AutoencoderConfig, ClassifierConfig, ConfigError, InputPipeline,
                    build_autoencoder, build_classifier, config_dict, evaluate_autoencoder,
                    evaluate_classifier, frozen_masks, load_checkpoint, load_state,
                    parameter_count, reconstruct, save_checkpoint, train_autoencoder,
                    train_classifier, write_metrics_csv)

UPPER_RIGHT_MASK = [[0, 0, 1], [0, 0, 0], [0, 0, 0]]
CORNER_PAIR_MASK = [[0, 0, 1], [0, 0, 0], [1, 0, 0]]


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------ run config

@dataclass
class RunConfig:
    task: str = "classify"
    model: str = "sgcn"
    imputer: str = ""
    mnist_dir: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    ppm_train_dir: str = ""
    ppm_test_dir: str = ""
    train_size: int = 10000
    test_size: int = 2000
    mask_size: int = 13
    seed: int = 0
    layers: int = 4
    width: int = 32
    filters: int = 4
    epochs: int = 10
    batch_size: int = 32
    lr: float | None = None  # None: 1e-2 for classify, 1e-3 for reconstruct
    lr_schedule: str = "cosine"
    resample_masks: bool = True
    knn_k: int = 5
    knn_pool: int = 10000
    encoder_widths: str = "16,16,32,32,32"
    decoder_width: int = 8
    batchnorm: bool = True

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        """``key=value`` lines; blank lines and ``#`` comments ignored, unknown keys rejected."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(value, types[key], key)
        cfg = cls(**values)
        if cfg.task not in ("classify", "reconstruct"):
            raise ConfigError(f"task must be classify or reconstruct, got {cfg.task!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def model_config(self):
        imputer = self.imputer or None
        common = dict(backbone=self.model, imputer=imputer, filters=self.filters, epochs=self.epochs,
                      batch_size=self.batch_size, seed=self.seed, lr_schedule=self.lr_schedule,
                      mask_size=self.mask_size, resample_masks=self.resample_masks, knn_k=self.knn_k, knn_pool=self.knn_pool)
        if self.lr is not None:
            common["lr"] = self.lr
        if self.task == "classify":
            return ClassifierConfig(layers=self.layers, width=self.width, **common).validate()
        widths = tuple(int(w) for w in self.encoder_widths.split(",") if w.strip())
        return AutoencoderConfig(encoder_widths=widths, decoder_width=self.decoder_width,
                                 batchnorm=self.batchnorm, **common).validate()


def _coerce(value: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ.endswith(" | None"):
        if value.lower() in ("", "none"):
            return None
        typ = typ[:-len(" | None")]
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from exc
    return value


# ------------------------------------------------------------------------ data

def load_sources(cfg: RunConfig) -> tuple[gdata.Dataset, gdata.Dataset | None]:
    if cfg.ppm_train_dir:
        train = gdata.load_ppm_dir(cfg.ppm_train_dir)
        test = gdata.load_ppm_dir(cfg.ppm_test_dir) if cfg.ppm_test_dir else None
        return train, test
    if cfg.train_images:
        train = gdata.parse_idx(cfg.train_images, cfg.train_labels)
        test = gdata.parse_idx(cfg.test_images, cfg.test_labels) if cfg.test_images else None
        return train, test
    if cfg.mnist_dir:
        train = gdata.load_mnist(cfg.mnist_dir, "train")
        try:
            test = gdata.load_mnist(cfg.mnist_dir, "test")
        except FileNotFoundError:
            test = None
        return train, test
    raise ConfigError("no dataset given: set mnist_dir, train_images/... or ppm_train_dir")


def prepare_data(cfg: RunConfig):
    """Seeded train/test subsets and their frozen masks."""
    root = Rng(cfg.seed)
    train_full, test_full = load_sources(cfg)
    if test_full is None:
        train, test = gdata.split(train_full, [cfg.train_size, cfg.test_size], root.spawn(10))
    else:
        (train,) = gdata.split(train_full, [min(cfg.train_size, len(train_full))], root.spawn(10))
        (test,) = gdata.split(test_full, [min(cfg.test_size, len(test_full))], root.spawn(11))
    n, m = train.images.shape[1:3]
    train_patches, train_missing = frozen_masks(root.spawn(20), len(train), n, m, cfg.mask_size)
    test_patches, test_missing = frozen_masks(root.spawn(21), len(test), n, m, cfg.mask_size)
    return train, test, (train_patches, train_missing), (test_patches, test_missing)


def _build(cfg: RunConfig, mcfg, channels: int):
    if cfg.task == "classify":
        return build_classifier(mcfg, channels)
    return build_autoencoder(mcfg, channels)


# -------------------------------------------------------------------- commands

def cmd_train(config_path, out_dir) -> dict:
    cfg = RunConfig.load(config_path)
    mcfg = cfg.model_config()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())

    train, test, (tr_p, tr_m), (te_p, te_m) = prepare_data(cfg)
    write_mask_file(out / "train_masks.txt", tr_p)
    write_mask_file(out / "test_masks.txt", te_p)
    channels = train.images.shape[3]
    model = _build(cfg, mcfg, channels)
    pipeline = InputPipeline(mcfg.backbone, mcfg.imputer, train.images, tr_m, mcfg.knn_k, mcfg.knn_pool)
    log(f"{cfg.task}/{cfg.model}{'/' + cfg.imputer if cfg.imputer else ''}: "
        f"{parameter_count(model)} parameters, {len(train)} train / {len(test)} test images")

    if cfg.task == "classify":
        metrics = train_classifier(model, pipeline, train.images, train.labels, tr_m, mcfg,
                                   test=(test.images, test.labels, te_m), log=log)
        final = evaluate_classifier(model, pipeline, test.images, test.labels, te_m, cfg.batch_size)
        metrics.add("final", "test", "error", final["error"])
        metrics.add("final", "test", "loss", final["loss"])
    else:
        metrics = train_autoencoder(model, pipeline, train.images, tr_m, mcfg,
                                    test=(test.images, te_m), log=log)
        final = evaluate_autoencoder(model, pipeline, test.images, te_m, cfg.batch_size)
        metrics.add("final", "test", "mse_inside", final["mse_inside"])
        metrics.add("final", "test", "mse_outside", final["mse_outside"])

    write_metrics_csv(out / "metrics.csv", metrics)
    (out / "timing.txt").write_text(f"wall_clock_seconds={metrics.wall_clock:.3f}\n")
    save_checkpoint(out / "model.ggnn", model, {"run_config": cfg.dump(), "task": cfg.task,
                                                "model_config": config_dict(mcfg)})
    summary = {k: float(v) for k, v in final.items()}
    log("final: " + json.dumps(summary))
    return summary


def _load_run(checkpoint):
    meta, state = load_checkpoint(checkpoint)
    cfg = RunConfig.parse(meta["run_config"])
    return meta, state, cfg


def _rebuild(checkpoint, mnist_dir=None):
    meta, state, cfg = _load_run(checkpoint)
    if mnist_dir:
        cfg.mnist_dir, cfg.train_images, cfg.ppm_train_dir = mnist_dir, "", ""
    mcfg = cfg.model_config()
    train, test, (_, tr_m), (te_p, te_m) = prepare_data(cfg)
    mask_file = Path(checkpoint).parent / "test_masks.txt"
    if mask_file.exists():
        te_p = read_mask_file(mask_file)
        te_m = patch_masks(te_p, *test.images.shape[1:3])
    model = _build(cfg, mcfg, train.images.shape[3])
    load_state(model, state)
    pipeline = InputPipeline(mcfg.backbone, mcfg.imputer, train.images, tr_m, mcfg.knn_k, mcfg.knn_pool)
    return cfg, model, pipeline, test, te_p, te_m


def cmd_eval(checkpoint, mnist_dir=None) -> dict:
    cfg, model, pipeline, test, _, te_m = _rebuild(checkpoint, mnist_dir)
    model.eval()
    if cfg.task == "classify":
        res = evaluate_classifier(model, pipeline, test.images, test.labels, te_m, cfg.batch_size)
    else:
        res = evaluate_autoencoder(model, pipeline, test.images, te_m, cfg.batch_size)
    for k, v in res.items():
        print(f"{k}={v!r}")
    return res


def _masked_render(values, missing):
    return np.where(missing[..., None], 128.0 / 255.0, values)


def cmd_export_recon(checkpoint, out_dir, count: int = 10, mnist_dir=None) -> list[Path]:
    """PGM dumps for the first test images: truth, masked input, model output, mean and k-NN fills."""
    meta, _, _ = _load_run(checkpoint)
    if meta.get("task") != "reconstruct":
        raise ValueError(f"{checkpoint} is a {meta.get('task')!r} checkpoint, not a reconstruction model")
    cfg, model, pipeline, test, _, te_m = _rebuild(checkpoint, mnist_dir)
    train, _, (_, tr_m), _ = prepare_data(cfg)
    vals, mk = test.images[:count], te_m[:count]
    recon = reconstruct(model, pipeline, vals, mk)
    stats = MeanStats.fit(train.images, tr_m)
    pool = KnnPool(train.images[:cfg.knn_pool], None, cfg.knn_k, stats)
    fills = {"mean": mean_impute(stats, vals, mk), "knn": knn_impute_batch(pool, vals, mk)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(len(vals)):
        items = {"truth": vals[i], "masked": _masked_render(vals[i], mk[i]),
                 cfg.model: recon[i], **{k: v[i] for k, v in fills.items()}}
        for name, img in items.items():
            path = out / f"{i:02d}_{name}.pgm"
            gdata.write_pgm(path, img)
            written.append(path)
    return written


def impute_eval(mnist_dir, imputer: str, pool: int = 10000, seed: int = 0, k: int = 5,
                mask_size: int = 13, test_size: int | None = None) -> float:
    """MSE inside the hole of raw imputations over the masked MNIST test set."""
    root = Rng(seed)
    train = gdata.load_mnist(mnist_dir, "train")
    test = gdata.load_mnist(mnist_dir, "test")
    if test_size is not None:
        test = test.subset(np.arange(min(test_size, len(test))))
    n, m = test.images.shape[1:3]
    _, te_m = frozen_masks(root.spawn(21), len(test), n, m, mask_size)
    _, tr_m = frozen_masks(root.spawn(20), len(train), n, m, mask_size)
    stats = MeanStats.fit(train.images, tr_m)
    if imputer == "mean":
        filled = mean_impute(stats, test.images, te_m)
    elif imputer == "knn":
        (sub,) = gdata.split(train, [min(pool, len(train))], root.spawn(10))
        filled = knn_impute_batch(KnnPool(sub.images, None, k, stats), test.images, te_m)
    else:
        raise ValueError(f"unknown imputer {imputer!r}")
    return float(((filled - test.images) ** 2)[te_m].mean())


def random_mask(rng: Rng, cin: int, cout: int) -> ConvMask:
    return ConvMask(rng.uniform(-1, 1, size=(3, 3, cin, cout)), rng.uniform(-1, 1, size=cout))


def equiv_check(masks: int = 100, size=(16, 16), seed: int = 0, tol: float = 1e-9,
                channels: int = 3, hole: int = 13, out=None) -> bool:
    """Compiled SGCN vs conv2d on random masks plus the two worked fixtures."""
    out = out or sys.stdout
    rng = Rng(seed)
    n, m = size
    hole = min(hole, n - 1, m - 1)
    cases = [("upper-right", ConvMask.from_grid(UPPER_RIGHT_MASK), None),
             ("corner-pair", ConvMask.from_grid(CORNER_PAIR_MASK), None),
             ("corner-pair/two-filter", ConvMask.from_grid(CORNER_PAIR_MASK), corner_pair_layer(1))]
    for i in range(masks):
        cin = rng.integers(1, channels + 1)
        cout = rng.integers(1, channels + 1)
        cases.append((f"random-{i}", random_mask(rng, cin, cout), None))
    ok = True
    worst = 0.0
    for name, mask, layer in cases:
        vals = rng.random((n, m, mask.in_channels))
        top, left = rng.integers(0, n - hole + 1), rng.integers(0, m - hole + 1)
        missing = np.zeros((n, m), bool)
        missing[top:top + hole, left:left + hole] = True
        img = IncompleteImage(vals, missing)
        activations = ("identity",) if layer is not None else ("identity", "relu")
        for act in activations:
            rep = verify_equivalence(mask, img, tol, act, layer=layer)
            worst = max(worst, rep.complete_diff, rep.holed_diff or 0.0)
            status = "PASS" if rep.passed else "FAIL"
            ok &= rep.passed
            print(f"{status} {name:<22} {act:<8} complete={rep.complete_diff:.3e} "
                  f"holed={rep.holed_diff:.3e}", file=out)
    print(f"{'PASS' if ok else 'FAIL'} {len(cases)} masks, max diff {worst:.3e}, tol {tol:g}", file=out)
    return ok


def make_masks(out, count: int, size: int = 13, height: int = 28, width: int = 28, seed: int = 0):
    patches, _ = frozen_masks(Rng(seed).spawn(21), count, height, width, size)
    write_mask_file(out, patches)
    return patches


# ------------------------------------------------------------------------- CLI

def _size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 16x16, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridgraph", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv-check", help="verify compiled SGCN layers against conv2d")
    p.add_argument("--masks", type=int, default=100)
    p.add_argument("--size", type=_size, default=(16, 16))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--channels", type=int, default=3)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint on its frozen test masks")
    p.add_argument("checkpoint")
    p.add_argument("--mnist-dir")

    p = sub.add_parser("export-recon", help="write PGM reconstructions for the first test images")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--mnist-dir")

    p = sub.add_parser("impute-eval", help="MSE inside the hole of raw mean / k-NN imputation")
    p.add_argument("--imputer", choices=("mean", "knn"), required=True)
    p.add_argument("--mnist-dir", required=True)
    p.add_argument("--pool", type=int, default=10000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-size", type=int, default=13)

    p = sub.add_parser("make-masks", help="write a frozen mask file")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=13)
    p.add_argument("--height", type=int, default=28)
    p.add_argument("--width", type=int, default=28)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(gdata.threads_from_env())
    except ImportError:
        pass
    try:
        if args.command == "equiv-check":
            return 0 if equiv_check(args.masks, args.size, args.seed, args.tol, args.channels) else 1
        if args.command == "train":
            cmd_train(args.config, args.out)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.mnist_dir)
        elif args.command == "export-recon":
            for path in cmd_export_recon(args.checkpoint, args.out, args.count, args.mnist_dir):
                print(path)
        elif args.command == "impute-eval":
            mse = impute_eval(args.mnist_dir, args.imputer, args.pool, args.seed, args.k, args.mask_size)
            print(f"imputer={args.imputer} mse_inside={mse!r}")
        elif args.command == "make-masks":
            make_masks(args.out, args.count, args.size, args.height, args.width, args.seed)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        log(f"error: {exc}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
