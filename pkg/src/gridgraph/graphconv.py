"""Spatial graph convolution (SGCN) and the coordinate-free GCN baseline.

Both layers aggregate over the in-neighbourhood of each node, which on a pixel
graph is indexed by the nine stencil offsets.  For node i and offset d, the
contribution is the feature row of ``graph.neighbors[d, i]`` (or nothing when
that pixel is missing).  Aggregation loops over offsets in a fixed order,
which is the same as summing the stored edges of each node in ascending order.

``SgcnLayer`` has two paths.  The reference path builds the per-filter
aggregations and feeds their concatenation to the readout.  The fused path
(default) folds the weight tables into the readout matrix first, so a layer
costs a single (N, 9I) x (9I, O) product; both give the same values up to
rounding.
"""
from __future__ import annotations

import numpy as np

from .imagegraph import OFFSETS, PixelGraph
from .nn import Dense, Layer, activate, activate_backward
from .tensor import DimensionError, Parameter

_OFF = OFFSETS.astype(np.float64)  # (9, 2)


def gather_neighbors(graph: PixelGraph, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (9, N, I) neighbour features (zeros where absent) and the padded index table."""
    N = graph.num_nodes
    if H.shape[0] != N:
        raise DimensionError(f"feature matrix has {H.shape[0]} rows for {N} nodes")
    idx = np.where(graph.neighbors >= 0, graph.neighbors, N)
    Hpad = np.concatenate([H, np.zeros((1, H.shape[1]))], axis=0)
    return Hpad[idx], idx


def scatter_neighbors(dG: np.ndarray, idx: np.ndarray, N: int) -> np.ndarray:
    """Adjoint of :func:`gather_neighbors`.

    Pixel graphs are symmetric: j is the neighbour of i at offset d exactly when
    i is the neighbour of j at the opposite offset, index ``8 - d``.  So the
    scatter is itself a gather, summed over offsets in ascending order.
    """
    pad = np.zeros((9, 1, dG.shape[2]))
    return _gather_opposite(np.concatenate([dG, pad], axis=1).transpose(1, 0, 2), idx, N)


def _gather_opposite(dpad: np.ndarray, idx: np.ndarray, N: int) -> np.ndarray:
    # dpad: (N + 1, 9, I) with a zero last row
    dH = dpad[idx[8], 0]
    for d in range(1, 9):
        dH += dpad[idx[8 - d], d]
    return dH


class SgcnFilter(Layer):
    """One spatial filter: neighbour weight ``relu(U @ offset + b)`` per channel."""

    def __init__(self, U, b):
        U = np.asarray(U, dtype=np.float64)
        if U.ndim != 2 or U.shape[1] != 2:
            raise ValueError(f"U must have shape (I, 2), got {U.shape}")
        self.U = Parameter(U)
        self.b = Parameter(np.asarray(b, dtype=np.float64).reshape(U.shape[0]))

    @classmethod
    def constant(cls, u, b: float, channels: int) -> "SgcnFilter":
        """Filter whose every channel row is ``u`` with bias ``b``."""
        return cls(np.tile(np.asarray(u, dtype=np.float64), (channels, 1)), np.full(channels, b))

    @property
    def channels(self) -> int:
        return self.U.shape[0]

    def weight_preactivation(self) -> np.ndarray:
        """(9, I) table of ``U @ z + b`` over the stencil offsets."""
        return _OFF @ self.U.value.T + self.b.value


def sgcn_aggregate(graph: PixelGraph, H: np.ndarray, filt: SgcnFilter) -> np.ndarray:
    """Row i: sum over neighbours j of relu(U (coord_j - coord_i) + b) * h_j."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[1] != filt.channels:
        raise DimensionError(f"filter has {filt.channels} channels, features have {H.shape[1]}")
    G, _ = gather_neighbors(graph, H)
    table = np.maximum(filt.weight_preactivation(), 0.0)
    out = np.zeros_like(H)
    for d in range(9):
        out += table[d] * G[d]
    return out


class SgcnLayer(Layer):
    """k spatial filters, concatenated per node, followed by a dense readout."""

    def __init__(self, in_channels: int, out_channels: int, num_filters: int = 4,
                 activation: str = "relu", rng=None, filters=None, readout=None, fused: bool = True):
        self.fused = fused
        if filters is None:
            filters = [SgcnFilter(rng.uniform(-1.0, 1.0, size=(in_channels, 2)),
                                  rng.uniform(0.0, 1.0, size=in_channels))
                       for _ in range(num_filters)]
        if any(f.channels != in_channels for f in filters):
            raise ValueError("all filters must share the input width")
        self.filters = list(filters)
        k = len(self.filters)
        self.readout = readout if readout is not None else Dense(
            k * in_channels, out_channels, activation, rng=rng)
        if self.readout.in_features != k * in_channels:
            raise ValueError(f"readout expects {self.readout.in_features} inputs, "
                             f"filters give {k * in_channels}")

    @property
    def in_channels(self) -> int:
        return self.filters[0].channels

    def forward(self, graph: PixelGraph, H: np.ndarray) -> np.ndarray:
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[1] != self.in_channels:
            raise DimensionError(f"SgcnLayer expects width {self.in_channels}, got {H.shape}")
        if self.fused:
            return self._forward_fused(graph, H)
        N, I = H.shape
        G, idx = gather_neighbors(graph, H)
        pre = np.stack([f.weight_preactivation() for f in self.filters], axis=1)  # (9, k, I)
        table = np.maximum(pre, 0.0)
        acc = np.zeros((N, len(self.filters), I))
        for d in range(9):
            acc += G[d][:, None, :] * table[d]
        self._cache = (G, idx, pre, table, N)
        return self.readout.forward(acc.reshape(N, -1))

    def _forward_fused(self, graph, H):
        # readout(concat_f sum_d table[d,f] * G[d]) == act(sum_d G[d] @ V[d] + bias)
        # with V[d] = sum_f diag(table[d,f]) W_f: one (N, 9I) x (9I, O) product.
        N, I = H.shape
        idx = np.where(graph.neighbors >= 0, graph.neighbors, N)
        Hpad = np.concatenate([H, np.zeros((1, I))], axis=0)
        G2 = Hpad[idx.T].reshape(N, 9 * I)
        pre = np.stack([f.weight_preactivation() for f in self.filters], axis=1)
        table = np.maximum(pre, 0.0)
        W = self.readout.W.value.reshape(len(self.filters), I, -1)
        V = np.einsum("dfi,fio->dio", table, W)
        z = G2 @ V.reshape(9 * I, -1) + self.readout.b.value
        out = activate(z, self.readout.activation)
        self._cache = (G2, idx, pre, table, V, z, out, N)
        return out

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self.fused:
            return self._backward_fused(upstream)
        G, idx, pre, table, N = self._cache
        k = len(self.filters)
        dacc = self.readout.backward(upstream).reshape(N, k, -1)
        dtable = np.empty_like(table)
        dG = np.empty_like(G)
        for d in range(9):
            dtable[d] = np.einsum("nki,ni->ki", dacc, G[d])
            dG[d] = np.einsum("nki,ki->ni", dacc, table[d])
        self._filter_grads(pre, dtable)
        return scatter_neighbors(dG, idx, N)

    def _backward_fused(self, upstream):
        G2, idx, pre, table, V, z, out, N = self._cache
        I = self.in_channels
        g = activate_backward(upstream, z, out, self.readout.activation)
        self.readout.b.grad += g.sum(axis=0)
        dV = (G2.T @ g).reshape(9, I, -1)
        dG2 = np.concatenate([g @ V.reshape(9 * I, -1).T, np.zeros((1, 9 * I))], axis=0)
        W = self.readout.W.value.reshape(len(self.filters), I, -1)
        self.readout.W.grad += np.einsum("dfi,dio->fio", table, dV).reshape(self.readout.W.shape)
        self._filter_grads(pre, np.einsum("dio,fio->dfi", dV, W))
        return _gather_opposite(dG2.reshape(N + 1, 9, I), idx, N)

    def _filter_grads(self, pre, dtable):
        dpre = np.where(pre > 0.0, dtable, 0.0)
        for f, filt in enumerate(self.filters):
            filt.U.grad += dpre[:, f, :].T @ _OFF
            filt.b.grad += dpre[:, f, :].sum(axis=0)

    def preactivations(self):
        if self.fused:
            z = self._cache[5]
            return [self._cache[2]] + ([z] if self.readout.activation == "relu" else [])
        return [self._cache[2]] + self.readout.preactivations()


def gcn_coefficient_table(graph: PixelGraph) -> np.ndarray:
    """(9, N) symmetric-normalised coefficients, zero where the neighbour is absent."""
    nbr = graph.neighbors
    deg = graph.in_degree().astype(np.float64)
    valid = nbr >= 0
    deg_j = np.where(valid, deg[np.where(valid, nbr, 0)], 1.0)
    return np.where(valid, 1.0 / np.sqrt(deg[None, :] * deg_j), 0.0)


def gcn_normalize(graph: PixelGraph) -> np.ndarray:
    """Per-edge ``1 / sqrt(deg_i * deg_j)`` in stored edge order (degrees include the self-edge)."""
    table = gcn_coefficient_table(graph)
    return table[graph.edges_offset_id, graph.edges_src]


class GcnLayer(Layer):
    """Topology-weighted neighbour sum, then ``relu(h @ W + bias)``; never reads coordinates."""

    def __init__(self, in_channels: int, out_channels: int, activation: str = "relu", rng=None,
                 weight=None, bias=None):
        self.dense = Dense(in_channels, out_channels, activation, rng=rng, weight=weight, bias=bias)

    @property
    def W(self):
        return self.dense.W

    @property
    def bias(self):
        return self.dense.b

    def forward(self, graph: PixelGraph, H: np.ndarray) -> np.ndarray:
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[1] != self.dense.in_features:
            raise DimensionError(f"GcnLayer expects width {self.dense.in_features}, got {H.shape}")
        coef = gcn_coefficient_table(graph)
        G, idx = gather_neighbors(graph, H)
        agg = np.zeros_like(H)
        for d in range(9):
            agg += coef[d][:, None] * G[d]
        self._cache = (coef, idx, H.shape[0])
        return self.dense.forward(agg)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        coef, idx, N = self._cache
        dagg = self.dense.backward(upstream)
        dG = coef[:, :, None] * dagg[None]
        return scatter_neighbors(dG, idx, N)

    def preactivations(self):
        return self.dense.preactivations()
