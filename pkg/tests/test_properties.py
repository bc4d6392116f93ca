import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gridgraph.data import Rng, decode_idx_images, encode_idx_images
from gridgraph.equiv import verify_equivalence
from gridgraph.graphconv import GcnLayer, SgcnLayer
from gridgraph.imagegraph import (EmptyGraphError, IncompleteImage, PatchSpec, PixelGraph, apply_patch,
                                  build_graph, gather_from_grid, scatter_to_grid)
from gridgraph.nn import masked_mse
from gridgraph.refconv import ConvMask, conv2d, transposed_conv2d

from conftest import brute_force_edges, graph_edges_as_pixels

finite = st.floats(-1.0, 1.0, allow_nan=False, width=64)


@st.composite
def incomplete_images(draw, max_side=6, channels=1):
    n = draw(st.integers(1, max_side))
    m = draw(st.integers(1, max_side))
    missing = draw(arrays(bool, (n, m)))
    if missing.all():
        missing[draw(st.integers(0, n - 1)), draw(st.integers(0, m - 1))] = False
    values = draw(arrays(np.float64, (n, m, channels), elements=finite))
    return IncompleteImage(values, missing)


@settings(max_examples=150, deadline=None)
@given(incomplete_images())
def test_graph_matches_pairwise_enumeration(img):
    assert graph_edges_as_pixels(build_graph(img)) == brute_force_edges(img.missing_mask)


@settings(max_examples=100, deadline=None)
@given(incomplete_images())
def test_edges_are_symmetric_with_opposite_offsets(img):
    g = build_graph(img)
    edges = set(g.edges())
    assert all((t, s, (-dx, -dy)) in edges for s, t, (dx, dy) in edges)
    assert g.num_nodes == img.observed_count
    assert np.array_equal(g.in_degree(), np.bincount(g.edges_dst, minlength=g.num_nodes))


@settings(max_examples=60, deadline=None)
@given(incomplete_images(channels=2), st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**31))
def test_sgcn_is_translation_equivariant(img, dr, dc, seed):
    # placing the image anywhere on a larger canvas of missing pixels changes nothing per pixel
    n, m, _ = img.values.shape
    canvas = np.zeros((n + 3, m + 3, 2))
    hole = np.ones((n + 3, m + 3), bool)
    canvas[dr:dr + n, dc:dc + m] = img.values
    hole[dr:dr + n, dc:dc + m] = img.missing_mask
    layer = SgcnLayer(2, 3, 2, rng=Rng(seed))
    g1, g2 = build_graph(img), build_graph(IncompleteImage(canvas, hole))
    out1 = scatter_to_grid(g1, layer.forward(g1, g1.features))
    out2 = scatter_to_grid(g2, layer.forward(g2, g2.features))
    assert np.array_equal(out1, out2[dr:dr + n, dc:dc + m])


def permuted(graph, perm):
    """Relabel nodes: new node k is old node perm[k]."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    nb = graph.neighbors[:, perm]
    nb = np.where(nb >= 0, inv[np.maximum(nb, 0)], -1)
    return PixelGraph(graph.coords[perm], graph.rows[perm], graph.cols[perm], graph.graph_id[perm], nb,
                      graph.features[perm], graph.height, graph.width, graph.num_graphs)


@settings(max_examples=60, deadline=None)
@given(incomplete_images(channels=2), st.integers(0, 2**31))
def test_layers_are_permutation_equivariant(img, seed):
    g = build_graph(img)
    perm = Rng(seed).permutation(g.num_nodes)
    gp = permuted(g, perm)
    for layer in (SgcnLayer(2, 3, 2, rng=Rng(seed)), GcnLayer(2, 3, rng=Rng(seed))):
        a = layer.forward(g, g.features)[perm]
        b = layer.forward(gp, gp.features)
        assert np.allclose(a, b, rtol=0, atol=1e-14)


@settings(max_examples=80, deadline=None)
@given(incomplete_images(channels=3))
def test_scatter_gather_round_trip(img):
    g = build_graph(img)
    grid = scatter_to_grid(g, g.features)
    assert np.array_equal(gather_from_grid(g, grid), g.features)
    assert np.array_equal(grid, img.values)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 3), elements=finite), st.floats(-1, 1), incomplete_images(max_side=7))
def test_compiled_layer_equals_zero_imputed_conv(mask, bias, img):
    rep = verify_equivalence(ConvMask(mask, [bias]), img, tol=1e-9)
    assert rep.passed, rep


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 3), st.integers(0, 2**31))
def test_transposed_conv_is_adjoint(n, m, stride, seed):
    rng = Rng(seed)
    mask = ConvMask(rng.uniform(-1, 1, (3, 3, 2, 2)), None)
    x = rng.uniform(-1, 1, (n, m, 2))
    y = rng.uniform(-1, 1, (-(-n // stride), -(-m // stride), 2))
    lhs = float((conv2d(mask, x, stride) * y).sum())
    rhs = float((x * transposed_conv2d(mask, y, stride, out_hw=(n, m))).sum())
    assert abs(lhs - rhs) < 1e-10


@settings(max_examples=100, deadline=None)
@given(arrays(bool, (2, 5, 5)), st.integers(0, 2**31))
def test_outside_loss_ignores_hole_targets(missing, seed):
    if missing.all():
        return
    rng = Rng(seed)
    pred, target = rng.random((2, 5, 5, 1)), rng.random((2, 5, 5, 1))
    other = target.copy()
    other[missing] = rng.random((int(missing.sum()), 1)) * 10
    loss1, grad1 = masked_mse(pred, target, missing, "outside")
    loss2, grad2 = masked_mse(pred, other, missing, "outside")
    assert loss1 == loss2 and np.array_equal(grad1, grad2)
    assert not grad1[missing].any()


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(0, 4), st.integers(1, 6), st.integers(1, 6))))
def test_idx_round_trip(pix):
    assert np.array_equal(decode_idx_images(encode_idx_images(pix)), pix)


def test_every_single_patch_on_small_images():
    for n in range(1, 6):
        for m in range(1, 6):
            for s in range(1, min(n, m) + 1):
                for top in range(n - s + 1):
                    for left in range(m - s + 1):
                        img = apply_patch(np.zeros((n, m)), PatchSpec(top, left, s))
                        if s == n == m:
                            try:
                                build_graph(img)
                            except EmptyGraphError:
                                continue
                            raise AssertionError("fully missing image accepted")
                        assert graph_edges_as_pixels(build_graph(img)) == brute_force_edges(img.missing_mask)
