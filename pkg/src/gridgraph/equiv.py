"""Compile any 3x3 convolution mask into SGCN parameters that reproduce it exactly.

A single filter ``relu(u . z + b)`` over the nine offsets z in {-1, 0, 1}^2 can
isolate a corner, but not an edge-midpoint or the centre: those points are not
vertices of the 3x3 grid's convex hull.  So every layer uses the same nine
fixed filters, whose weight tables are linearly independent.  The readout
matrix holds the linear combination that rebuilds each tap of the mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphconv import SgcnFilter, SgcnLayer
from .imagegraph import OFFSETS, IncompleteImage, build_graph
from .nn import Dense
from .refconv import ConvMask, conv2d


class SingularBasisError(RuntimeError):
    pass


# (name, u, b); the order fixes the filter order of every compiled layer
BASIS = (
    ("corner(+1,+1)", (2.0, 2.0), -3.0),
    ("corner(+1,-1)", (2.0, -2.0), -3.0),
    ("corner(-1,+1)", (-2.0, 2.0), -3.0),
    ("corner(-1,-1)", (-2.0, -2.0), -3.0),
    ("column(x=+1)", (2.0, 0.0), -1.0),
    ("column(x=-1)", (-2.0, 0.0), -1.0),
    ("row(y=+1)", (0.0, 2.0), -1.0),
    ("row(y=-1)", (0.0, -2.0), -1.0),
    ("all", (0.0, 0.0), 1.0),
)
BASIS_NAMES = tuple(name for name, _, _ in BASIS)


def weight_table(u, b: float) -> np.ndarray:
    """relu(u . z + b) laid out like a mask: row 0 is dy=+1, column 0 is dx=-1."""
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(OFFSETS @ u + b, 0.0).reshape(3, 3)


def basis_matrix() -> np.ndarray:
    """(9 filters, 9 offsets) matrix of evaluated weight tables."""
    return np.stack([weight_table(u, b).reshape(9) for _, u, b in BASIS])


def gauss_solve(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs by Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=np.float64)
    x = np.array(rhs, dtype=np.float64)
    n = A.shape[0]
    scale = np.abs(A).max() or 1.0
    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[piv, col]) <= 1e-12 * scale:
            raise SingularBasisError(f"matrix is singular at column {col}")
        if piv != col:
            A[[col, piv]] = A[[piv, col]]
            x[[col, piv]] = x[[piv, col]]
        for r in range(col + 1, n):
            f = A[r, col] / A[col, col]
            if f != 0.0:
                A[r, col:] -= f * A[col, col:]
                x[r] -= f * x[col]
    for col in range(n - 1, -1, -1):
        x[col] = (x[col] - A[col, col + 1:] @ x[col + 1:]) / A[col, col]
    return x


def solve_basis(mask3x3, residual_tol: float = 1e-10) -> np.ndarray:
    """Coefficients alpha with sum_f alpha_f w_f(z) = mask(z) at every offset."""
    target = np.asarray(mask3x3, dtype=np.float64).reshape(9)
    Bm = basis_matrix()
    alpha = gauss_solve(Bm.T, target)
    resid = np.abs(Bm.T @ alpha - target).max()
    if resid >= residual_tol * max(1.0, np.abs(target).max()):
        raise SingularBasisError(f"basis solve residual {resid:.3e}")
    return alpha


def _offset_coefficients() -> np.ndarray:
    """beta[d, f]: combination of basis filters giving the indicator of offset d."""
    return np.stack([solve_basis(np.eye(9)[d]) for d in range(9)])


def compile_mask(mask: ConvMask, activation: str = "identity") -> SgcnLayer:
    """SGCN layer equal to ``conv2d(mask, .)`` (then ReLU if requested) on complete images."""
    if mask.weights.shape[:2] != (3, 3):
        raise ValueError(f"only 3x3 masks can be compiled, got {mask.weights.shape[:2]}")
    cin, cout = mask.in_channels, mask.out_channels
    filters = [SgcnFilter.constant(u, b, cin) for _, u, b in BASIS]
    beta = _offset_coefficients()
    taps = mask.weights.reshape(9, cin, cout)  # visual row-major == OFFSETS order
    W = np.einsum("df,dco->fco", beta, taps).reshape(9 * cin, cout)
    readout = Dense(9 * cin, cout, activation, weight=W, bias=mask.bias.copy())
    return SgcnLayer(cin, cout, filters=filters, readout=readout)


def corner_pair_layer(channels: int = 1) -> SgcnLayer:
    """Two-filter layer summing the upper-right and lower-left neighbours."""
    filters = [SgcnFilter.constant((2.0, 2.0), -3.0, channels),
               SgcnFilter.constant((-2.0, -2.0), -3.0, channels)]
    W = np.tile(np.eye(channels), (2, 1))
    readout = Dense(2 * channels, channels, "identity", weight=W, bias=np.zeros(channels))
    return SgcnLayer(channels, channels, filters=filters, readout=readout)


def sgcn_on_image(layer: SgcnLayer, img: IncompleteImage) -> tuple[np.ndarray, np.ndarray]:
    """Run ``layer`` on the pixel graph; return an (n, m, C) grid and the observed mask."""
    graph = build_graph(img)
    out = layer.forward(graph, graph.features)
    n, m = img.missing_mask.shape
    grid = np.zeros((n, m, out.shape[1]))
    grid[graph.rows, graph.cols] = out
    return grid, ~img.missing_mask


@dataclass
class EquivalenceReport:
    complete_diff: float
    holed_diff: float | None
    tol: float

    @property
    def passed(self) -> bool:
        ok = self.complete_diff < self.tol
        if self.holed_diff is not None:
            ok = ok and self.holed_diff < self.tol
        return ok


def reference_output(mask: ConvMask, values: np.ndarray, activation: str) -> np.ndarray:
    ref = conv2d(mask, values)
    return np.maximum(ref, 0.0) if activation == "relu" else ref


def verify_equivalence(mask: ConvMask, image: IncompleteImage, tol: float = 1e-9,
                       activation: str = "identity", layer: SgcnLayer | None = None) -> EquivalenceReport:
    """Compare the compiled layer with conv2d on the completed image and, if the image
    has holes, at observed pixels against conv2d of the zero-filled image."""
    layer = compile_mask(mask, activation) if layer is None else layer
    full = IncompleteImage.complete(image.values)
    grid, _ = sgcn_on_image(layer, full)
    complete_diff = float(np.abs(grid - reference_output(mask, full.values, activation)).max())

    holed_diff = None
    if image.missing_mask.any():
        grid, observed = sgcn_on_image(layer, image)
        ref = reference_output(mask, image.values, activation)
        holed_diff = float(np.abs(grid - ref)[observed].max())
    return EquivalenceReport(complete_diff, holed_diff, tol)
