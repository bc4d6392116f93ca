"""Incomplete images and their pixel-graph representation.

Coordinate convention shared by every module: a node at image position
(row, col) of an n-row image has coordinate ``(x, y) = (col, n - 1 - row)``,
so +x points right and +y points up.  Offset (1, 1) is the upper-right
neighbour.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

# Visual row-major order of a 3x3 stencil: top row (dy=+1) first, left to right.
OFFSETS = np.array([(dx, dy) for dy in (1, 0, -1) for dx in (-1, 0, 1)], dtype=np.int64)
SELF_OFFSET = 4


class EmptyGraphError(ValueError):
    pass


def offset_index(dx: int, dy: int) -> int:
    return (1 - dy) * 3 + (dx + 1)


@dataclass
class IncompleteImage:
    """Image tensor (n, m, l) with a boolean ``missing_mask`` of shape (n, m).

    Values under the mask are stored as zero and never read.
    """
    values: np.ndarray
    missing_mask: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[..., None]
        mask = np.asarray(self.missing_mask, dtype=bool)
        if mask.shape != v.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match image {v.shape}")
        v = np.where(mask[..., None], 0.0, v)
        self.values = v
        self.missing_mask = mask

    @classmethod
    def complete(cls, values) -> "IncompleteImage":
        v = np.asarray(values, dtype=np.float64)
        return cls(v, np.zeros(v.shape[:2], dtype=bool))

    @classmethod
    def from_missing(cls, values, missing) -> "IncompleteImage":
        v = np.asarray(values, dtype=np.float64)
        mask = np.zeros(v.shape[:2], dtype=bool)
        for r, c in missing:
            mask[r, c] = True
        return cls(v, mask)

    @property
    def shape(self):
        return self.values.shape

    @property
    def missing(self) -> frozenset:
        return frozenset(map(tuple, np.argwhere(self.missing_mask).tolist()))

    @property
    def observed_count(self) -> int:
        return int((~self.missing_mask).sum())


@dataclass
class PixelGraph:
    """Disjoint union of one or more pixel graphs.

    ``neighbors[d, i]`` is the node at offset ``OFFSETS[d]`` from node i, or -1.
    Edges (src, dst, offset) are ordered by src, then by offset index; the
    offset is ``coord[dst] - coord[src]``.
    """
    coords: np.ndarray       # (N, 2) int, (x, y)
    rows: np.ndarray         # (N,) image row
    cols: np.ndarray         # (N,) image column
    graph_id: np.ndarray     # (N,) which image each node came from
    neighbors: np.ndarray    # (9, N) int
    features: np.ndarray     # (N, l)
    height: int
    width: int
    num_graphs: int = 1
    _index: dict | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    @cached_property
    def _edge_arrays(self):
        # nonzero on the (N, 9) view walks src-major, offset-minor
        src, d_idx = np.nonzero(self.neighbors.T >= 0)
        dst = self.neighbors[d_idx, src]
        return src, dst, d_idx

    @property
    def edges_src(self):
        return self._edge_arrays[0]

    @property
    def edges_dst(self):
        return self._edge_arrays[1]

    @property
    def edges_offset_id(self):
        return self._edge_arrays[2]

    @property
    def edges_offset(self):
        return OFFSETS[self._edge_arrays[2]]

    @property
    def num_edges(self) -> int:
        return int((self.neighbors >= 0).sum())

    def edges(self):
        """List of ``(src, dst, (dx, dy))`` in stored order."""
        src, dst, d = self._edge_arrays
        return [(int(s), int(t), tuple(int(v) for v in OFFSETS[k])) for s, t, k in zip(src, dst, d)]

    @property
    def index(self) -> dict:
        """Map from ``(graph_id, x, y)`` to node id (``(x, y)`` for a single graph)."""
        if self._index is None:
            if self.num_graphs == 1:
                self._index = {(int(x), int(y)): i for i, (x, y) in enumerate(self.coords)}
            else:
                self._index = {(int(g), int(x), int(y)): i
                               for i, (g, (x, y)) in enumerate(zip(self.graph_id, self.coords))}
        return self._index

    def in_degree(self) -> np.ndarray:
        return (self.neighbors >= 0).sum(axis=0)

    def graph_sizes(self) -> np.ndarray:
        return np.bincount(self.graph_id, minlength=self.num_graphs)

    def with_features(self, features: np.ndarray) -> "PixelGraph":
        return PixelGraph(self.coords, self.rows, self.cols, self.graph_id, self.neighbors,
                          np.asarray(features, dtype=np.float64), self.height, self.width,
                          self.num_graphs)


def build_graph_batch(values: np.ndarray, missing: np.ndarray) -> PixelGraph:
    """Build the disjoint union of the pixel graphs of a batch of images.

    values: (B, n, m, l); missing: (B, n, m) boolean.  Nodes are numbered
    image by image in row-major pixel order.
    """
    values = np.asarray(values, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool)
    if values.ndim == 3:
        values = values[..., None]
    B, n, m = missing.shape
    observed = ~missing
    counts = observed.reshape(B, -1).sum(axis=1)
    if np.any(counts == 0):
        raise EmptyGraphError(f"image(s) {np.flatnonzero(counts == 0).tolist()} have no observed pixel")

    ids = np.full((B, n + 2, m + 2), -1, dtype=np.int64)
    b_idx, r_idx, c_idx = np.nonzero(observed)
    N = len(b_idx)
    ids[b_idx, r_idx + 1, c_idx + 1] = np.arange(N)

    neighbors = np.empty((9, N), dtype=np.int64)
    for d, (dx, dy) in enumerate(OFFSETS):
        neighbors[d] = ids[b_idx, r_idx + 1 - dy, c_idx + 1 + dx]

    coords = np.stack([c_idx, (n - 1) - r_idx], axis=1)
    features = values[b_idx, r_idx, c_idx, :]
    return PixelGraph(coords, r_idx, c_idx, b_idx, neighbors, features, n, m, B)


def build_graph(img: IncompleteImage) -> PixelGraph:
    return build_graph_batch(img.values[None], img.missing_mask[None])


@dataclass(frozen=True)
class PatchSpec:
    top: int
    left: int
    size: int

    def validate(self, n: int, m: int) -> None:
        if not (0 <= self.top <= n - self.size and 0 <= self.left <= m - self.size):
            raise ValueError(f"patch {self} does not fit inside a {n}x{m} image")

    def coordinates(self) -> set:
        return {(r, c) for r in range(self.top, self.top + self.size)
                for c in range(self.left, self.left + self.size)}


def sample_patch(rng, n: int, m: int, s: int) -> PatchSpec:
    """Patch position uniform over all placements fully inside the image."""
    if s > min(n, m) or s < 1:
        raise ValueError(f"patch size {s} does not fit a {n}x{m} image")
    top = rng.integers(0, n - s + 1)
    left = rng.integers(0, m - s + 1)
    return PatchSpec(int(top), int(left), s)


def sample_patches(rng, count: int, n: int, m: int, s: int) -> list[PatchSpec]:
    if s > min(n, m) or s < 1:
        raise ValueError(f"patch size {s} does not fit a {n}x{m} image")
    u = rng.integers(0, (n - s + 1) * (m - s + 1), size=count)
    tops, lefts = np.divmod(u, m - s + 1)
    return [PatchSpec(int(t), int(l), s) for t, l in zip(tops, lefts)]


def patch_mask(patch: PatchSpec, n: int, m: int) -> np.ndarray:
    patch.validate(n, m)
    mask = np.zeros((n, m), dtype=bool)
    mask[patch.top:patch.top + patch.size, patch.left:patch.left + patch.size] = True
    return mask


def patch_masks(patches, n: int, m: int) -> np.ndarray:
    return np.stack([patch_mask(p, n, m) for p in patches]) if patches else np.zeros((0, n, m), bool)


def apply_patch(img, patch: PatchSpec) -> IncompleteImage:
    """Hide the patch; any earlier missing set is replaced."""
    values = img.values if isinstance(img, IncompleteImage) else np.asarray(img, dtype=np.float64)
    if values.ndim == 2:
        values = values[..., None]
    return IncompleteImage(values, patch_mask(patch, values.shape[0], values.shape[1]))


def scatter_to_grid(graph: PixelGraph, node_features: np.ndarray, n: int | None = None,
                    m: int | None = None, fill: float = 0.0,
                    with_mask_channel: bool = False) -> np.ndarray:
    """Write node rows back to their pixels.

    Returns (n, m, C[+1]) for a single graph and (B, n, m, C[+1]) for a batch.
    The optional extra channel is 1 at missing pixels.
    """
    n = graph.height if n is None else n
    m = graph.width if m is None else m
    feats = np.asarray(node_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(graph.rows) and (graph.rows.max() >= n or graph.cols.max() >= m):
        raise IndexError(f"node coordinates exceed the {n}x{m} grid")
    C = feats.shape[1]
    out = np.full((graph.num_graphs, n, m, C + int(with_mask_channel)), fill, dtype=np.float64)
    out[graph.graph_id, graph.rows, graph.cols, :C] = feats
    if with_mask_channel:
        out[..., C] = 1.0
        out[graph.graph_id, graph.rows, graph.cols, C] = 0.0
    return out[0] if graph.num_graphs == 1 else out


def gather_from_grid(graph: PixelGraph, grid: np.ndarray, channels: int | None = None) -> np.ndarray:
    """Adjoint of :func:`scatter_to_grid` on the feature channels."""
    if grid.ndim == 3:
        grid = grid[None]
    g = grid[graph.graph_id, graph.rows, graph.cols]
    return g if channels is None else g[:, :channels]


def write_mask_file(path, patches) -> None:
    """One line per image: ``index top left size``."""
    with open(path, "w") as fh:
        for i, p in enumerate(patches):
            fh.write(f"{i} {p.top} {p.left} {p.size}\n")


def read_mask_file(path) -> list[PatchSpec]:
    patches = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'index top left size'")
        i, top, left, size = (int(v) for v in parts)
        patches[i] = PatchSpec(top, left, size)
    if sorted(patches) != list(range(len(patches))):
        raise ValueError(f"{path}: image indices must be 0..{len(patches) - 1}")
    return [patches[i] for i in range(len(patches))]
