"""Trainable layers, losses and the Adam optimizer shared by graph and CNN models."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import DimensionError, Parameter, dot, reduce, relu_backward

ACTIVATIONS = ("relu", "identity", "sigmoid")


def glorot_uniform(rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "sigmoid":
        return sigmoid(pre)
    if kind == "identity":
        return pre
    raise ValueError(f"unknown activation {kind!r}")


def activate_backward(upstream: np.ndarray, pre: np.ndarray, out: np.ndarray, kind: str):
    if kind == "relu":
        return relu_backward(upstream, pre)
    if kind == "sigmoid":
        return upstream * out * (1.0 - out)
    return upstream


class Layer:
    """Base class: ``forward`` caches, ``backward`` returns the input gradient."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state saved in checkpoints (running statistics)."""
        for name, value in vars(self).items():
            if isinstance(value, Layer):
                yield from value.buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.buffers(f"{prefix}{name}.{i}.")

    def train(self, mode: bool = True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Layer):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def preactivations(self) -> list[np.ndarray]:
        """Arrays fed to ReLU in the last forward pass (for kink screening)."""
        return []


class Dense(Layer):
    """``activation(X @ W + b)``."""

    def __init__(self, in_features: int, out_features: int, activation: str = "relu", rng=None,
                 weight=None, bias=None):
        if out_features < 1:
            raise ValueError("Dense output width must be >= 1")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if weight is None:
            weight = glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        self.W = Parameter(weight)
        self.b = Parameter(np.zeros(out_features) if bias is None else bias)
        self.activation = activation

    @property
    def in_features(self):
        return self.W.shape[0]

    def forward(self, X: np.ndarray) -> np.ndarray:
        if X.shape[-1] != self.W.shape[0]:
            raise DimensionError(f"Dense expects width {self.W.shape[0]}, got {X.shape[-1]}")
        self._x = X
        self._pre = dot(X, self.W.value) + self.b.value
        self._out = activate(self._pre, self.activation)
        return self._out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        g = activate_backward(upstream, self._pre, self._out, self.activation)
        self.W.grad += self._x.T @ g
        self.b.grad += g.sum(axis=0)
        return g @ self.W.value.T

    def preactivations(self):
        return [self._pre] if self.activation == "relu" else []


class ReLU(Layer):
    def forward(self, X):
        self._x = X
        return np.maximum(X, 0.0)

    def backward(self, upstream):
        return relu_backward(upstream, self._x)

    def preactivations(self):
        return [self._x]


class BatchNorm(Layer):
    """Per-channel normalization over every leading axis (nodes or batch x pixels)."""

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.epsilon = epsilon

    def buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, X: np.ndarray) -> np.ndarray:
        shape = X.shape
        x = X.reshape(-1, shape[-1])
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm needs at least 2 rows per channel in training mode")
            mean = x.mean(axis=0)
            xc = x - mean
            var = (xc * xc).mean(axis=0)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            xc = x - self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std, shape)
        return (xhat * self.gamma.value + self.beta.value).reshape(shape)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        xhat, inv_std, shape = self._cache
        g = upstream.reshape(-1, shape[-1])
        self.gamma.grad += (g * xhat).sum(axis=0)
        self.beta.grad += g.sum(axis=0)
        gx = g * self.gamma.value
        if not self.training:
            return (gx * inv_std).reshape(shape)
        dx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        return dx.reshape(shape)


class GlobalMeanPool(Layer):
    """Per-graph mean of node rows given a membership vector."""

    def forward(self, X: np.ndarray, graph_id: np.ndarray, num_graphs: int) -> np.ndarray:
        counts = np.bincount(graph_id, minlength=num_graphs)
        if np.any(counts == 0):
            raise ValueError(f"graph(s) {np.flatnonzero(counts == 0).tolist()} have no nodes")
        if np.all(np.diff(graph_id) >= 0):
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            sums = np.add.reduceat(X, starts, axis=0)
        else:
            sums = np.zeros((num_graphs, X.shape[1]))
            np.add.at(sums, graph_id, X)
        self._ids = graph_id
        self._counts = counts
        return sums / counts[:, None]

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        return (upstream / self._counts[:, None])[self._ids]


class SpatialMeanPool(Layer):
    """Mean over the spatial axes of (B, n, m, C)."""

    def forward(self, X):
        self._shape = X.shape
        return X.mean(axis=(1, 2))

    def backward(self, upstream):
        B, n, m, C = self._shape
        return np.broadcast_to(upstream[:, None, None, :] / (n * m), self._shape).copy()


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / B``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"expected {B} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must lie in 0..{C - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = float(-logp[np.arange(B), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def masked_mse(pred: np.ndarray, target: np.ndarray, missing_mask: np.ndarray,
               region: str = "outside") -> tuple[float, np.ndarray]:
    """Mean squared error over the pixels inside or outside the missing set.

    ``pred``/``target``: (n, m, l) or (B, n, m, l); ``missing_mask``: matching
    (n, m) or (B, n, m).  The mean runs over selected pixels x channels.
    Returns the loss and its gradient with respect to ``pred``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    mask = np.asarray(missing_mask, dtype=bool)
    if region == "inside":
        sel = mask
    elif region == "outside":
        sel = ~mask
    else:
        raise ValueError(f"region must be 'inside' or 'outside', got {region!r}")
    if sel.shape != pred.shape[:-1]:
        raise DimensionError(f"mask {mask.shape} does not match prediction {pred.shape}")
    count = int(sel.sum()) * pred.shape[-1]
    if count == 0:
        raise ValueError(f"the {region} region is empty")
    w = sel[..., None].astype(np.float64)
    diff = np.where(w > 0, pred - target, 0.0)
    loss = float(reduce(diff * diff) / count)  # sequential, row-major
    return loss, 2.0 * diff / count


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()
