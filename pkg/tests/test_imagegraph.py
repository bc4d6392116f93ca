import numpy as np
import pytest

from gridgraph.data import Rng
from gridgraph.imagegraph import (OFFSETS, SELF_OFFSET, EmptyGraphError, IncompleteImage, PatchSpec,
                                  apply_patch, build_graph, build_graph_batch, gather_from_grid,
                                  offset_index, patch_mask, read_mask_file, sample_patch,
                                  sample_patches, scatter_to_grid, write_mask_file)

from conftest import brute_force_edges, graph_edges_as_pixels


def test_offset_order():
    assert tuple(OFFSETS[SELF_OFFSET]) == (0, 0)
    for d, (dx, dy) in enumerate(OFFSETS):
        assert offset_index(dx, dy) == d
    assert tuple(OFFSETS[0]) == (-1, 1)  # visual upper-left first


def test_missing_values_are_zeroed():
    img = IncompleteImage(np.full((2, 2), 5.0), [[True, False], [False, False]])
    assert img.values[0, 0, 0] == 0.0
    assert img.missing == frozenset({(0, 0)})
    assert img.observed_count == 3


def test_two_by_two_hole_in_four_by_four():
    img = apply_patch(np.ones((4, 4)), PatchSpec(1, 1, 2))
    assert build_graph(img).num_nodes == 12


def test_single_pixel_image():
    g = build_graph(IncompleteImage.complete(np.array([[0.5]])))
    assert g.num_nodes == 1
    assert g.edges() == [(0, 0, (0, 0))]


def test_complete_four_by_four_matches_pairwise_enumeration():
    missing = np.zeros((4, 4), bool)
    g = build_graph(IncompleteImage(np.zeros((4, 4)), missing))
    assert graph_edges_as_pixels(g) == brute_force_edges(missing)


def test_edge_offset_is_coordinate_difference():
    rng = Rng(5)
    missing = rng.random((6, 7)) < 0.3
    g = build_graph(IncompleteImage(rng.random((6, 7)), missing))
    assert np.array_equal(g.coords[g.edges_dst] - g.coords[g.edges_src], g.edges_offset)
    # stored order: by source, then by offset
    key = g.edges_src * 9 + g.edges_offset_id
    assert np.all(np.diff(key) > 0)


def test_coordinates_put_y_up():
    g = build_graph(IncompleteImage.complete(np.zeros((3, 2))))
    assert g.index[(0, 2)] == 0  # top-left pixel
    assert g.index[(1, 0)] == 5  # bottom-right pixel


def test_fully_missing_image_rejected():
    img = apply_patch(np.ones((4, 4)), PatchSpec(0, 0, 4))
    with pytest.raises(EmptyGraphError):
        build_graph(img)


def test_batch_is_disjoint_union():
    rng = Rng(2)
    vals = rng.random((3, 5, 5, 2))
    missing = rng.random((3, 5, 5)) < 0.4
    batch = build_graph_batch(vals, missing)
    offset = 0
    for b in range(3):
        single = build_graph(IncompleteImage(vals[b], missing[b]))
        sel = batch.graph_id == b
        assert sel.sum() == single.num_nodes
        nb = batch.neighbors[:, sel]
        assert np.array_equal(np.where(nb >= 0, nb - offset, -1), single.neighbors)
        assert np.array_equal(batch.features[sel], single.features)
        offset += single.num_nodes
    assert np.array_equal(batch.graph_sizes(), [(~m).sum() for m in missing])


def test_sample_patch_single_position():
    rng = Rng(0)
    assert all(sample_patch(rng, 5, 5, 5) == PatchSpec(0, 0, 5) for _ in range(20))


def test_patch_positions_are_uniform():
    # chi-square over the 16 x 16 placements, 1e5 draws, p > 0.001
    patches = sample_patches(Rng(99), 100_000, 28, 28, 13)
    tops = np.array([p.top for p in patches])
    lefts = np.array([p.left for p in patches])
    assert tops.min() == 0 and tops.max() == 15 and lefts.min() == 0 and lefts.max() == 15
    counts = np.bincount(tops * 16 + lefts, minlength=256)
    expected = 100_000 / 256
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 0.999 quantile of chi-square with 255 degrees of freedom
    assert chi2 < 330.5, chi2
    for p in patches[:1000]:
        p.validate(28, 28)


def test_single_draw_sampler_is_uniform_too():
    rng = Rng(7)
    draws = [sample_patch(rng, 6, 6, 3) for _ in range(16000)]
    counts = np.bincount([p.top * 4 + p.left for p in draws], minlength=16)
    chi2 = float(((counts - 1000) ** 2 / 1000).sum())
    assert chi2 < 37.7  # 0.999 quantile, 15 dof


def test_standard_patch_sizes():
    img = apply_patch(np.zeros((28, 28)), PatchSpec(4, 9, 13))
    assert len(img.missing) == 169
    assert img.observed_count == 615
    assert apply_patch(np.zeros((4, 4)), PatchSpec(0, 0, 2)).missing == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_patch_must_fit():
    with pytest.raises(ValueError):
        patch_mask(PatchSpec(20, 0, 13), 28, 28)
    with pytest.raises(ValueError):
        sample_patch(Rng(0), 5, 5, 6)


def test_scatter_reproduces_complete_image():
    vals = Rng(1).random((4, 5, 3))
    g = build_graph(IncompleteImage.complete(vals))
    assert np.array_equal(scatter_to_grid(g, g.features, fill=-7.0), vals)


def test_scatter_single_observed_pixel():
    missing = np.ones((3, 3), bool)
    missing[1, 2] = False
    g = build_graph(IncompleteImage(np.full((3, 3), 0.5), missing))
    grid = scatter_to_grid(g, [[2.0]], fill=-1.0)
    expected = np.full((3, 3, 1), -1.0)
    expected[1, 2] = 2.0
    assert np.array_equal(grid, expected)


def test_scatter_mask_channel_counts_hole():
    img = apply_patch(np.ones((28, 28)), PatchSpec(0, 15, 13))
    g = build_graph(img)
    grid = scatter_to_grid(g, g.features, with_mask_channel=True)
    assert grid.shape == (28, 28, 2)
    assert grid[..., 1].sum() == 169
    assert np.array_equal(grid[..., 1] == 1, img.missing_mask)


def test_gather_is_adjoint_of_scatter():
    rng = Rng(4)
    missing = rng.random((2, 5, 6)) < 0.3
    g = build_graph_batch(rng.random((2, 5, 6, 1)), missing)
    feats = rng.random((g.num_nodes, 3))
    grid = rng.random((2, 5, 6, 3))
    lhs = float((scatter_to_grid(g, feats) * grid).sum())
    rhs = float((feats * gather_from_grid(g, grid)).sum())
    assert abs(lhs - rhs) < 1e-12


def test_mask_file_round_trip(tmp_path):
    patches = sample_patches(Rng(3), 25, 28, 28, 13)
    write_mask_file(tmp_path / "m.txt", patches)
    assert read_mask_file(tmp_path / "m.txt") == patches
