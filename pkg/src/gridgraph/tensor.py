"""Dense numeric core.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Layers in this
package follow a simple contract instead of a tape: ``forward`` caches what it
needs, ``backward(upstream)`` returns the input gradient and accumulates into
the ``grad`` of each owned :class:`Parameter`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed ascending summation order over the inner index.

    The result is bitwise identical to the textbook triple loop.  Layers use
    BLAS through :func:`dot`; this routine is the exact reference.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return np.where(x > 0.0, upstream, 0.0)


def hadamard(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def reduce(x, axis=None, mode: str = "sum") -> np.ndarray:
    """Sum or mean along ``axis`` (all axes if None), accumulating sequentially.

    ``np.cumsum`` adds strictly left to right, unlike ``np.sum`` which uses
    pairwise summation, so the last prefix is the sequential sum.
    """
    x = as_tensor(x)
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown reduce mode {mode!r}")
    if axis is None:
        flat = x.reshape(-1)
        total = np.cumsum(flat)[-1] if flat.size else DTYPE(0.0)
        count = flat.size
    else:
        if not -x.ndim <= axis < x.ndim:
            raise DimensionError(f"reduce: invalid axis {axis} for tensor of rank {x.ndim}")
        count = x.shape[axis]
        if count == 0:
            total = np.zeros(np.delete(x.shape, axis), dtype=DTYPE)
        else:
            total = np.take(np.cumsum(x, axis=axis), -1, axis=axis)
    if mode == "mean":
        return np.asarray(total / count)
    return np.asarray(total)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: list[float]
    worst: tuple[int, tuple[int, ...]] | None
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(f: Callable[[], float], params: Sequence[Parameter], eps: float = 1e-5,
               tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f`` evaluates the scalar loss at the current parameter values and runs the
    backward pass, leaving fresh gradients in every ``Parameter.grad``.
    """
    for p in params:
        p.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise GradCheckError(f"loss is not finite at the base point: {base}")
    analytic = [p.grad.copy() for p in params]

    per_param = []
    worst_val, worst = -1.0, None
    for pi, p in enumerate(params):
        numeric = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + eps
            fp = f()
            p.value[idx] = orig - eps
            fm = f()
            p.value[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"loss not finite when perturbing parameter {pi} at {idx}")
            numeric[idx] = (fp - fm) / (2.0 * eps)
        err = rel_error(analytic[pi], numeric)
        m = float(err.max()) if err.size else 0.0
        per_param.append(m)
        if m > worst_val:
            worst_val = m
            worst = (pi, np.unravel_index(int(err.argmax()), err.shape) if err.size else ())
    for p, g in zip(params, analytic):
        p.grad[...] = g
    return GradCheckReport(max(per_param, default=0.0), per_param, worst, tol)


def sample_away_from_zero(rng, shape, scale: float = 1.0) -> np.ndarray:
    """Draw from U(-1,-0.1) U U(0.1,1), times ``scale``."""
    mag = 0.1 + 0.9 * rng.random(shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return scale * sign * mag
