"""Classical 2-D convolution with in-range (zero padded) boundaries, and its adjoint.

Images are channels-last: (n, m, C) or batched (B, n, m, C).  Kernels are
(2k+1, 2k+1, Cin, Cout) written in visual order: tap ``[a, c]`` reads the pixel
at row offset ``a - k`` and column offset ``c - k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import ACTIVATIONS, Layer, activate, activate_backward, glorot_uniform
from .tensor import DimensionError, Parameter


def tap_to_offset(a: int, c: int, radius: int = 1) -> tuple[int, int]:
    """Kernel tap ``[a, c]`` to the graph offset (dx, dy); +y is up, so row offsets flip sign."""
    return c - radius, radius - a


def offset_to_tap(dx: int, dy: int, radius: int = 1) -> tuple[int, int]:
    return radius - dy, dx + radius


@dataclass
class ConvMask:
    weights: np.ndarray  # (2k+1, 2k+1, Cin, Cout)
    bias: np.ndarray     # (Cout,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[:, :, None, None]
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"mask must be (2k+1, 2k+1, Cin, Cout), got {w.shape}")
        self.weights = w
        b = np.zeros(w.shape[3]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        self.bias = b.reshape(w.shape[3])

    @classmethod
    def from_grid(cls, grid, bias=None) -> "ConvMask":
        return cls(np.asarray(grid, dtype=np.float64), bias)

    @property
    def radius(self) -> int:
        return self.weights.shape[0] // 2

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


def _out_size(n: int, stride: int) -> int:
    return math.ceil(n / stride)


def _batched(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (n, m, C) or (B, n, m, C), got shape {x.shape}")


def _check_stride(stride: int):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")


def conv_forward(X: np.ndarray, W: np.ndarray, stride: int = 1) -> np.ndarray:
    """Batched (B, n, m, Cin) -> (B, ceil(n/s), ceil(m/s), Cout), no bias."""
    _check_stride(stride)
    B, n, m, cin = X.shape
    kh = W.shape[0]
    if W.shape[2] != cin:
        raise DimensionError(f"kernel expects {W.shape[2]} input channels, got {cin}")
    r = kh // 2
    on, om = _out_size(n, stride), _out_size(m, stride)
    Xp = np.pad(X, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.zeros((B, on, om, W.shape[3]))
    for a in range(kh):
        for c in range(kh):
            patch = Xp[:, a:a + stride * (on - 1) + 1:stride, c:c + stride * (om - 1) + 1:stride, :]
            out += patch @ W[a, c]
    return out


def conv_adjoint(G: np.ndarray, W: np.ndarray, stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`conv_forward`: (B, on, om, Cout) -> (B, n, m, Cin)."""
    _check_stride(stride)
    n, m = out_hw
    B, on, om, cout = G.shape
    if (on, om) != (_out_size(n, stride), _out_size(m, stride)):
        raise DimensionError(f"{(on, om)} is not the stride-{stride} output size of {(n, m)}")
    if W.shape[3] != cout:
        raise DimensionError(f"kernel has {W.shape[3]} output channels, gradient has {cout}")
    kh = W.shape[0]
    r = kh // 2
    Xp = np.zeros((B, n + 2 * r, m + 2 * r, W.shape[2]))
    for a in range(kh):
        for c in range(kh):
            Xp[:, a:a + stride * (on - 1) + 1:stride, c:c + stride * (om - 1) + 1:stride, :] += G @ W[a, c].T
    return Xp[:, r:r + n, r:r + m, :]


def conv_weight_grad(X: np.ndarray, G: np.ndarray, kh: int, stride: int) -> np.ndarray:
    """d<conv_forward(X, W), G>/dW."""
    B, n, m, cin = X.shape
    on, om, cout = G.shape[1:]
    r = kh // 2
    Xp = np.pad(X, ((0, 0), (r, r), (r, r), (0, 0)))
    Gf = G.reshape(-1, cout)
    dW = np.empty((kh, kh, cin, cout))
    for a in range(kh):
        for c in range(kh):
            patch = Xp[:, a:a + stride * (on - 1) + 1:stride, c:c + stride * (om - 1) + 1:stride, :]
            dW[a, c] = patch.reshape(-1, cin).T @ Gf
    return dW


def conv2d(mask: ConvMask, H: np.ndarray, stride: int = 1) -> np.ndarray:
    """g_ij = sum over in-range taps of m_{i'j'} h_{i+i', j+j'} (over input channels) + bias."""
    X, single = _batched(H)
    out = conv_forward(X, mask.weights, stride) + mask.bias
    return out[0] if single else out


def transposed_conv2d(mask: ConvMask, H: np.ndarray, stride: int = 1, out_hw=None) -> np.ndarray:
    """Adjoint of ``conv2d`` with the same mask and stride (bias excluded).

    ``H`` carries the mask's output channels; the result carries its input
    channels and is ``stride`` times larger unless ``out_hw`` is given.
    """
    Y, single = _batched(H)
    if out_hw is None:
        out_hw = (Y.shape[1] * stride, Y.shape[2] * stride)
    out = conv_adjoint(Y, mask.weights, stride, out_hw)
    return out[0] if single else out


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 activation: str = "identity", kernel_size: int = 3, rng=None, weight=None, bias=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        if weight is None:
            fan_in = kernel_size * kernel_size * in_channels
            fan_out = kernel_size * kernel_size * out_channels
            weight = glorot_uniform(rng, shape, fan_in, fan_out)
        self.W = Parameter(weight)
        self.b = Parameter(np.zeros(out_channels) if bias is None else bias)
        self.stride = stride
        self.activation = activation

    def forward(self, X: np.ndarray) -> np.ndarray:
        self._x = X
        self._pre = conv_forward(X, self.W.value, self.stride) + self.b.value
        self._out = activate(self._pre, self.activation)
        return self._out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        g = activate_backward(upstream, self._pre, self._out, self.activation)
        self.W.grad += conv_weight_grad(self._x, g, self.W.shape[0], self.stride)
        self.b.grad += g.sum(axis=(0, 1, 2))
        return conv_adjoint(g, self.W.value, self.stride, self._x.shape[1:3])

    def preactivations(self):
        return [self._pre] if self.activation == "relu" else []


class TransposedConv2d(Layer):
    """Upsampling layer: the adjoint of a strided ``Conv2d`` from ``out_channels`` to ``in_channels``."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2,
                 activation: str = "identity", kernel_size: int = 3, rng=None, weight=None, bias=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        shape = (kernel_size, kernel_size, out_channels, in_channels)
        if weight is None:
            fan_in = kernel_size * kernel_size * in_channels
            fan_out = kernel_size * kernel_size * out_channels
            weight = glorot_uniform(rng, shape, fan_in, fan_out)
        self.W = Parameter(weight)
        self.b = Parameter(np.zeros(out_channels) if bias is None else bias)
        self.stride = stride
        self.activation = activation

    def forward(self, Y: np.ndarray) -> np.ndarray:
        self._y = Y
        hw = (Y.shape[1] * self.stride, Y.shape[2] * self.stride)
        self._pre = conv_adjoint(Y, self.W.value, self.stride, hw) + self.b.value
        self._out = activate(self._pre, self.activation)
        return self._out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        g = activate_backward(upstream, self._pre, self._out, self.activation)
        self.W.grad += conv_weight_grad(g, self._y, self.W.shape[0], self.stride)
        self.b.grad += g.sum(axis=(0, 1, 2))
        return conv_forward(g, self.W.value, self.stride)

    def preactivations(self):
        return [self._pre] if self.activation == "relu" else []
