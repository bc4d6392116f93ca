import itertools

import numpy as np
import pytest

from gridgraph.data import Rng
from gridgraph.tensor import Parameter, grad_check


@pytest.fixture
def rng():
    return Rng(1234)


def kink_free(arrays, margin):
    return all(a.size == 0 or np.abs(a).min() > margin for a in arrays)


def check_layer_gradients(make, points=5, tol=1e-5, margin=1e-4, max_tries=60, seed=0, eps=1e-5):
    """Finite-difference check of a layer at ``points`` seeded points away from ReLU kinks.

    ``make(rng)`` returns (forward, backward, params, x, preacts): forward(x) -> out,
    backward(upstream) -> dx (accumulating parameter grads) and preacts() -> arrays
    that must stay clear of zero.  The scalar probe is sum(out * R) for a fixed random R.
    Returns the list of max relative errors, one per accepted point.
    """
    errors = []
    for attempt in range(max_tries):
        rng = Rng(seed * 1000 + attempt)
        forward, backward, params, x, preacts = make(rng)
        out = forward(x)
        if not kink_free(preacts(), margin):
            continue
        xp = Parameter(np.array(x, dtype=np.float64))
        R = rng.uniform(-1.0, 1.0, size=out.shape)

        def f():
            for p in params:
                p.zero_grad()
            y = forward(xp.value)
            xp.grad[...] = backward(R)
            return float((y * R).sum())

        report = grad_check(f, list(params) + [xp], eps=eps, tol=tol)
        assert report.passed, f"relative error {report.max_rel_error:.3e} at {report.worst}"
        errors.append(report.max_rel_error)
        if len(errors) == points:
            return errors
    raise AssertionError(f"only {len(errors)} kink-free points in {max_tries} tries")


def brute_force_edges(missing):
    """All (src_pixel, dst_pixel, (dx, dy)) between observed pixels at Chebyshev distance <= 1."""
    n, m = missing.shape
    pixels = [(r, c) for r in range(n) for c in range(m) if not missing[r, c]]
    edges = []
    for (r1, c1), (r2, c2) in itertools.product(pixels, pixels):
        if max(abs(r1 - r2), abs(c1 - c2)) <= 1:
            edges.append(((r1, c1), (r2, c2), (c2 - c1, r1 - r2)))
    return sorted(edges)


def graph_edges_as_pixels(graph):
    return sorted(((int(graph.rows[s]), int(graph.cols[s])), (int(graph.rows[t]), int(graph.cols[t])), off)
                  for s, t, off in graph.edges())


def loop_conv2d(X, W, bias, stride=1):
    """Quadruple-loop zero-padded 'same' convolution, channels-last, visual tap order."""
    n, m, cin = X.shape
    kh = W.shape[0]
    r = kh // 2
    on, om = -(-n // stride), -(-m // stride)
    out = np.zeros((on, om, W.shape[3]))
    for i in range(on):
        for j in range(om):
            for o in range(W.shape[3]):
                acc = 0.0
                for a in range(kh):
                    for c in range(kh):
                        y, x = i * stride + a - r, j * stride + c - r
                        if 0 <= y < n and 0 <= x < m:
                            for ch in range(cin):
                                acc += X[y, x, ch] * W[a, c, ch, o]
                out[i, j, o] = acc + bias[o]
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda line: int(line.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
