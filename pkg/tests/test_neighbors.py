"""Exact k-NN kernels, the spatial index, and the fixed 2D-window baseline."""

import numpy as np
import pytest

from cloudtrack import kernels
from cloudtrack.errors import ConfigError, EmptyCloudError, ShapeError
from cloudtrack.knn import SpatialIndex, fixed_2d_neighbors


def scalar_knn(points, ids, query, k):
    """Reference k-NN: scalar loop, ties toward the smaller payload id.

    Squared distances accumulate x, y, z left to right so the comparison
    against the kernels can be exact.
    """
    def d2_of(p):
        dx, dy, dz = (float(a) - float(b) for a, b in zip(p, query))
        return dx * dx + dy * dy + dz * dz

    scored = sorted((d2_of(p), int(i)) for p, i in zip(points, ids))
    top = scored[: min(k, len(scored))]
    while len(top) < k:
        top.append(top[0])
    out_ids = np.array([i for _, i in top], dtype=np.int64)
    out_d2 = np.array([d for d, _ in top], dtype=np.float64)
    return out_ids, out_d2


def make_cloud(rng, n, spread=2.0):
    pts = rng.normal(size=(n, 3)) * spread
    ids = rng.permutation(n * 3)[:n].astype(np.int64)  # sparse, shuffled ids
    return pts, ids


# --- kernel backends -----------------------------------------------------------


def test_brute_query_matches_scalar_oracle(rng):
    pts, ids = make_cloud(rng, 100)
    order = np.argsort(ids)
    pts, ids = pts[order], ids[order]
    queries = rng.normal(size=(25, 3)) * 2.0
    got_ids, got_d2, counts = kernels.brute_query(pts, ids, queries, 7)
    assert counts.tolist() == [7] * 25
    for b, q in enumerate(queries):
        want_ids, want_d2 = scalar_knn(pts, ids, q, 7)
        np.testing.assert_array_equal(got_ids[b], want_ids)
        np.testing.assert_allclose(got_d2[b], want_d2, rtol=0, atol=0)


def test_backends_bit_identical(rng):
    if not kernels.compiled_available():
        pytest.skip("compiled kernel not built")
    for trial in range(10):
        pts, ids = make_cloud(rng, 300 + 40 * trial)
        order = np.argsort(ids)
        pts, ids = pts[order], ids[order]
        queries = rng.normal(size=(50, 3)) * 3.0
        grid = kernels.grid_build(pts)
        c_ids, c_d2, c_n = kernels.compiled_grid_query(pts, ids, grid, queries, 16)
        p_ids, p_d2, p_n = kernels.brute_query(pts, ids, queries, 16)
        np.testing.assert_array_equal(c_ids, p_ids)
        np.testing.assert_array_equal(c_d2, p_d2)  # bitwise, not approx
        np.testing.assert_array_equal(c_n, p_n)


def test_distance_ties_break_toward_smaller_id():
    # four points at identical distance from the origin query
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
    ids = np.array([40, 30, 20, 10], dtype=np.int64)
    order = np.argsort(ids)
    out_ids, _, _ = kernels.brute_query(pts[order], ids[order], np.zeros((1, 3)), 3)
    assert out_ids[0].tolist() == [10, 20, 30]


def test_padding_repeats_nearest():
    pts = np.array([[0.0, 0, 1.0], [0, 0, 2.0]])
    ids = np.array([5, 9], dtype=np.int64)
    out_ids, out_d2, counts = kernels.brute_query(pts, ids, np.zeros((1, 3)), 5)
    assert counts[0] == 2
    assert out_ids[0].tolist() == [5, 9, 5, 5, 5]
    np.testing.assert_allclose(out_d2[0], [1.0, 4.0, 1.0, 1.0, 1.0])


def test_query_validation():
    pts = np.zeros((3, 3))
    ids = np.arange(3, dtype=np.int64)
    with pytest.raises(ConfigError):
        kernels.brute_query(pts, ids, np.zeros((1, 3)), 0)
    with pytest.raises(ShapeError):
        kernels.brute_query(np.zeros((3, 2)), ids, np.zeros((1, 3)), 1)
    with pytest.raises(ShapeError):
        kernels.brute_query(np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                            np.zeros((1, 3)), 1)


def test_grid_build_handles_degenerate_extents():
    # collinear points: two zero-extent axes must not break cell sizing
    pts = np.stack([np.linspace(0, 1, 32), np.zeros(32), np.zeros(32)], axis=1)
    ids = np.arange(32, dtype=np.int64)
    grid = kernels.grid_build(pts)
    out_ids, out_d2, _ = kernels.grid_query(pts, ids, grid, pts[:4], 3)
    want_ids, want_d2 = scalar_knn(pts, ids, pts[0], 3)
    np.testing.assert_array_equal(out_ids[0], want_ids)
    np.testing.assert_allclose(out_d2[0], want_d2)


def test_grid_build_single_point():
    pts = np.array([[1.0, 2.0, 3.0]])
    grid = kernels.grid_build(pts)
    out_ids, out_d2, counts = kernels.grid_query(
        pts, np.array([7], dtype=np.int64), grid, np.zeros((1, 3)), 4
    )
    assert out_ids[0].tolist() == [7, 7, 7, 7]
    assert counts[0] == 1


# --- SpatialIndex ----------------------------------------------------------------


def test_spatial_index_query_offsets_and_distances(rng):
    pts, ids = make_cloud(rng, 200)
    index = SpatialIndex(pts, ids)
    queries = rng.normal(size=(10, 3))
    batch = index.query(queries, 8)
    assert batch.k == 8 and len(batch) == 10
    # offsets point from the query to the neighbor, lengths match distances
    lengths = np.linalg.norm(batch.offsets, axis=-1)
    np.testing.assert_allclose(lengths, batch.distances, atol=1e-6)
    for row in range(10):
        d = batch.distances[row, : batch.counts[row]]
        assert np.all(np.diff(d) >= 0), "distances must be nondecreasing"


def test_spatial_index_matches_scalar_oracle(rng):
    pts, ids = make_cloud(rng, 150)
    index = SpatialIndex(pts, ids)
    queries = rng.normal(size=(20, 3)) * 2
    batch = index.query(queries, 5)
    order = np.argsort(ids)
    spts, sids = pts[order], ids[order]
    for b, q in enumerate(queries):
        want_ids, want_d2 = scalar_knn(spts, sids, q, 5)
        np.testing.assert_array_equal(batch.ids[b], want_ids)
        np.testing.assert_allclose(batch.distances[b] ** 2, want_d2, atol=1e-9)


def test_spatial_index_rejects_bad_input():
    with pytest.raises(EmptyCloudError):
        SpatialIndex(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ShapeError):
        SpatialIndex(np.zeros((3, 3)), np.array([1, 1, 2]))  # duplicate ids
    with pytest.raises(ShapeError):
        SpatialIndex(np.array([[np.nan, 0, 0]]), np.array([0]))


def test_neighbor_set_row_view(rng):
    pts, ids = make_cloud(rng, 30)
    batch = SpatialIndex(pts, ids).query(rng.normal(size=(3, 3)), 40)
    row = batch.row(1)
    assert row.k == 40
    assert row.padded and row.num_real == 30


# --- fixed 2D window baseline -----------------------------------------------------


def grid_fixture(rng, h=6, w=8):
    coords = rng.normal(size=(h, w, 3))
    coords[..., 2] = rng.uniform(1, 5, size=(h, w))
    valid = np.ones((h, w), dtype=bool)
    return coords, valid


def test_fixed_2d_window_membership(rng):
    coords, valid = grid_fixture(rng)
    q = coords[3, 4][None]
    batch = fixed_2d_neighbors(coords, valid, q, np.array([[3, 4]]), radius=1)
    # membership is exactly the 3x3 pixel block, regardless of depth
    want = {(r * 8 + c) for r in (2, 3, 4) for c in (3, 4, 5)}
    assert set(batch.ids[0].tolist()) == want
    assert batch.counts[0] == 9


def test_fixed_2d_window_ignores_depth_discontinuity(rng):
    coords, valid = grid_fixture(rng)
    coords[2, 3, 2] = 100.0  # hugely far in depth, same pixel cell distance
    q = coords[3, 4][None]
    batch = fixed_2d_neighbors(coords, valid, q, np.array([[3, 4]]), radius=1)
    assert 2 * 8 + 3 in batch.ids[0].tolist()


def test_fixed_2d_window_clips_at_border_and_pads(rng):
    coords, valid = grid_fixture(rng)
    q = coords[0, 0][None]
    batch = fixed_2d_neighbors(coords, valid, q, np.array([[0, 0]]), radius=1)
    assert batch.counts[0] == 4  # corner keeps a 2x2 block
    assert batch.k == 9
    assert np.all(batch.ids[0, 4:] == batch.ids[0, 0])


def test_fixed_2d_window_drops_invalid_cells(rng):
    coords, valid = grid_fixture(rng)
    valid[2:5, 3:6] = False
    valid[3, 4] = True
    q = coords[3, 4][None]
    batch = fixed_2d_neighbors(coords, valid, q, np.array([[3, 4]]), radius=1)
    assert batch.counts[0] == 1
    assert batch.ids[0].tolist() == [3 * 8 + 4] * 9


def test_fixed_2d_window_all_invalid_raises(rng):
    coords, valid = grid_fixture(rng)
    valid[:] = False
    with pytest.raises(EmptyCloudError):
        fixed_2d_neighbors(coords, valid, coords[1, 1][None],
                           np.array([[1, 1]]), radius=1)


def test_fixed_2d_offsets_remain_3d(rng):
    coords, valid = grid_fixture(rng)
    q = coords[3, 4][None] + 0.01
    batch = fixed_2d_neighbors(coords, valid, q, np.array([[3, 4]]), radius=2)
    flat = batch.ids[0]
    np.testing.assert_allclose(
        batch.offsets[0], coords.reshape(-1, 3)[flat] - q[0], atol=1e-12
    )
