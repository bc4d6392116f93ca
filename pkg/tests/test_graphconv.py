import numpy as np
import pytest

from gridgraph.data import Rng
from gridgraph.graphconv import (GcnLayer, SgcnFilter, SgcnLayer, gcn_coefficient_table, gcn_normalize,
                                 sgcn_aggregate)
from gridgraph.imagegraph import IncompleteImage, build_graph, build_graph_batch
from gridgraph.nn import Dense
from gridgraph.tensor import DimensionError

from conftest import check_layer_gradients


def complete_graph(vals):
    return build_graph(IncompleteImage.complete(vals))


def test_constant_filter_sums_the_neighbourhood():
    vals = Rng(0).random((4, 4, 2))
    g = complete_graph(vals)
    out = sgcn_aggregate(g, g.features, SgcnFilter.constant((0.0, 0.0), 1.0, 2))
    i = g.index[(1, 2)]  # interior pixel at row 1, column 1
    assert np.allclose(out[i], vals[0:3, 0:3].sum(axis=(0, 1)), atol=1e-15)


def test_corner_filter_picks_upper_right_neighbour():
    vals = Rng(1).random((5, 5, 1))
    g = complete_graph(vals)
    out = sgcn_aggregate(g, g.features, SgcnFilter.constant((2.0, 2.0), -3.0, 1))
    grid = np.zeros((5, 5))
    grid[g.rows, g.cols] = out[:, 0]
    expected = np.zeros((5, 5))
    expected[1:, :-1] = vals[:-1, 1:, 0]  # pixel (r, c) takes (r-1, c+1)
    assert np.array_equal(grid, expected)


def test_two_node_hand_example():
    # pixels (row 0, col 0) and (row 0, col 1) of a 1x2 image: coords (0,0) and (1,0)
    g = build_graph(IncompleteImage.complete(np.array([[[1.0, 2.0], [3.0, 5.0]]])))
    filt = SgcnFilter(np.array([[1.0, 0.0], [0.5, -1.0]]), np.array([0.5, 0.25]))
    out = sgcn_aggregate(g, g.features, filt)
    # node 0: self (offset 0,0) -> relu(b) ; neighbour (1,0) -> relu(U[:,0] + b)
    w_self = np.array([0.5, 0.25])
    w_right = np.maximum(np.array([1.0, 0.5]) + [0.5, 0.25], 0)
    w_left = np.maximum(np.array([-1.0, -0.5]) + [0.5, 0.25], 0)
    assert np.allclose(out[0], w_self * [1, 2] + w_right * [3, 5], atol=1e-15)
    assert np.allclose(out[1], w_self * [3, 5] + w_left * [1, 2], atol=1e-15)


def test_single_filter_identity_readout_equals_aggregate():
    rng = Rng(2)
    vals = rng.random((4, 5, 3))
    missing = rng.random((4, 5)) < 0.3
    g = build_graph(IncompleteImage(vals, missing))
    filt = SgcnFilter(rng.uniform(-1, 1, (3, 2)), rng.uniform(0, 1, 3))
    readout = Dense(3, 3, "identity", weight=np.eye(3), bias=np.zeros(3))
    for fused in (False, True):
        layer = SgcnLayer(3, 3, filters=[filt], readout=readout, fused=fused)
        assert np.allclose(layer.forward(g, g.features), sgcn_aggregate(g, g.features, filt), atol=1e-14)


def test_fused_and_reference_paths_agree():
    rng = Rng(3)
    g = build_graph_batch(rng.random((2, 6, 6, 3)), rng.random((2, 6, 6)) < 0.3)
    a = SgcnLayer(3, 4, 3, rng=Rng(9), fused=True)
    b = SgcnLayer(3, 4, 3, rng=Rng(9), fused=False)
    up = rng.uniform(-1, 1, (g.num_nodes, 4))
    assert np.allclose(a.forward(g, g.features), b.forward(g, g.features), atol=1e-13)
    assert np.allclose(a.backward(up), b.backward(up), atol=1e-13)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.allclose(p.grad, q.grad, atol=1e-12), name


@pytest.mark.parametrize("fused", [True, False])
@pytest.mark.parametrize("activation", ["relu", "identity"])
def test_sgcn_layer_gradients(fused, activation):
    def make(rng):
        g = build_graph_batch(rng.random((2, 4, 4, 2)), rng.random((2, 4, 4)) < 0.3)
        layer = SgcnLayer(2, 3, 2, activation, rng=rng, fused=fused)
        layer.readout.b.value[:] = rng.uniform(-0.5, 0.5, 3)
        return (lambda x: layer.forward(g, x)), layer.backward, layer.parameters(), \
            rng.uniform(-1, 1, (g.num_nodes, 2)), layer.preactivations

    check_layer_gradients(make)


def test_sgcn_rejects_wrong_width():
    g = complete_graph(np.zeros((2, 2, 2)))
    with pytest.raises(DimensionError):
        SgcnLayer(3, 2, rng=Rng(0)).forward(g, g.features)


def test_gcn_isolated_node_coefficient():
    missing = np.ones((3, 3), bool)
    missing[1, 1] = False
    assert np.array_equal(gcn_normalize(build_graph(IncompleteImage(np.ones((3, 3)), missing))), [1.0])


def test_gcn_two_adjacent_nodes():
    g = complete_graph(np.ones((1, 2)))
    assert np.allclose(gcn_normalize(g), 0.5, atol=1e-15)
    assert len(g.edges()) == 4


def test_gcn_interior_coefficients():
    g = complete_graph(np.ones((5, 5)))
    table = gcn_coefficient_table(g)
    i = g.index[(2, 2)]
    assert np.allclose(table[:, i], 1 / 9, atol=1e-16)


def test_gcn_constant_features_on_regular_region():
    # on a torus-free grid only interior nodes are regular; those all see the same sum
    g = complete_graph(np.ones((6, 6)))
    layer = GcnLayer(1, 2, "identity", weight=np.array([[1.0, -2.0]]), bias=np.zeros(2))
    out = layer.forward(g, np.full((g.num_nodes, 1), 0.7))
    interior = (g.rows > 1) & (g.rows < 4) & (g.cols > 1) & (g.cols < 4)
    assert np.allclose(out[interior], out[interior][0], atol=1e-15)


def test_gcn_single_node():
    g = complete_graph(np.array([[0.4]]))
    W, b = np.array([[1.5, -2.0, 0.3]]), np.array([0.1, 0.2, -0.5])
    out = GcnLayer(1, 3, "relu", weight=W, bias=b).forward(g, g.features)
    assert np.allclose(out, np.maximum(0.4 * W + b, 0), atol=1e-16)


def test_gcn_ignores_coordinates():
    # same connectivity, different geometry: a horizontal and a vertical pair
    h = complete_graph(np.array([[0.2, 0.9]]))
    v = complete_graph(np.array([[0.2], [0.9]]))
    layer = GcnLayer(1, 2, rng=Rng(0))
    assert np.array_equal(layer.forward(h, h.features), layer.forward(v, v.features))


def test_gcn_layer_gradients():
    def make(rng):
        g = build_graph_batch(rng.random((2, 4, 4, 2)), rng.random((2, 4, 4)) < 0.3)
        layer = GcnLayer(2, 3, "relu", rng=rng, bias=rng.uniform(-0.5, 0.5, 3))
        return (lambda x: layer.forward(g, x)), layer.backward, layer.parameters(), \
            rng.uniform(-1, 1, (g.num_nodes, 2)), layer.preactivations

    check_layer_gradients(make)
