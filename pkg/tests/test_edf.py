import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cranempc.edf import (
    VoxelEdf,
    VoxelGrid,
    compute_edf_bruteforce,
    query_distance,
    query_gradient,
    set_box_obstacle,
    update_edf_incremental,
)


def small_grid(n=12, resolution=0.1):
    return VoxelGrid(np.zeros(3), resolution, (n, n, n))


def pairwise_field(grid, d_max):
    """Literal definition: min over occupied centers, truncated."""
    every = grid.flat_centers(np.arange(grid.size))
    occupied = grid.flat_centers(grid.occupied_indices())
    if len(occupied) == 0:
        return np.full(grid.dims, d_max)
    d = np.linalg.norm(every[:, None, :] - occupied[None, :, :], axis=-1).min(axis=1)
    return np.minimum(d, d_max).reshape(grid.dims)


def random_box(rng, grid):
    lo = rng.uniform(grid.origin - 0.2, grid.upper, size=3)
    return lo, lo + rng.uniform(0.0, 0.8, size=3)


# ---------------------------------------------------------------- grid


def test_from_bounds_covers_extent():
    grid = VoxelGrid.from_bounds([-1.0, 0.0, 0.0], [1.0, 0.55, 0.3], 0.1)
    assert grid.dims == (20, 6, 3)
    assert np.all(grid.upper >= [1.0, 0.55, 0.3])


def test_index_center_bijection():
    grid = small_grid()
    idx = np.indices(grid.dims).reshape(3, -1).T
    np.testing.assert_array_equal(grid.index_of(grid.center(idx)), idx)


@pytest.mark.parametrize("bad", [dict(resolution=0.0), dict(dims=(0, 2, 2))])
def test_invalid_grid_rejected(bad):
    kwargs = dict(origin=np.zeros(3), resolution=0.1, dims=(2, 2, 2)) | bad
    with pytest.raises(ValueError):
        VoxelGrid(**kwargs)


def test_save_load_round_trip(tmp_path):
    grid = small_grid()
    set_box_obstacle(grid, [0.2, 0.3, 0.1], [0.6, 0.5, 0.4])
    grid.save(tmp_path / "grid.json")
    loaded = VoxelGrid.load(tmp_path / "grid.json")
    np.testing.assert_array_equal(loaded.occupancy, grid.occupancy)
    np.testing.assert_array_equal(loaded.origin, grid.origin)
    assert loaded.resolution == grid.resolution and loaded.dims == grid.dims


# ---------------------------------------------------------------- box obstacles


def test_sub_voxel_box_changes_one_voxel():
    grid = small_grid()
    changed = set_box_obstacle(grid, [0.34, 0.34, 0.34], [0.36, 0.36, 0.36])
    assert changed.size == 1
    assert grid.occupancy[3, 3, 3]


def test_box_is_idempotent():
    grid = small_grid()
    assert set_box_obstacle(grid, [0.2, 0.2, 0.2], [0.5, 0.5, 0.5]).size > 0
    assert set_box_obstacle(grid, [0.2, 0.2, 0.2], [0.5, 0.5, 0.5]).size == 0


def test_unit_box_occupies_thousand_voxels():
    grid = VoxelGrid(np.zeros(3), 0.1, (20, 20, 20))
    changed = set_box_obstacle(grid, [0.55, 0.55, 0.55], [1.45, 1.45, 1.45])
    assert changed.size == 1000 == grid.occupancy.sum()


def test_box_outside_grid_is_empty_change():
    grid = small_grid()
    assert set_box_obstacle(grid, [5.0, 5.0, 5.0], [6.0, 6.0, 6.0]).size == 0


def test_box_removal_reports_changes():
    grid = small_grid()
    added = set_box_obstacle(grid, [0.2, 0.2, 0.2], [0.5, 0.5, 0.5])
    removed = set_box_obstacle(grid, [0.0, 0.0, 0.0], [1.2, 1.2, 1.2], occupied=False)
    np.testing.assert_array_equal(np.sort(added), np.sort(removed))
    assert not grid.occupancy.any()


@pytest.mark.parametrize("lo, hi", [([0.5, 0, 0], [0.4, 1, 1]), ([np.nan, 0, 0], [1, 1, 1])])
def test_bad_box_rejected(lo, hi):
    with pytest.raises(ValueError):
        set_box_obstacle(small_grid(), lo, hi)


# ---------------------------------------------------------------- brute force


def test_empty_grid_is_d_max():
    edf = compute_edf_bruteforce(small_grid(), d_max=2.0)
    assert np.all(edf.dist == 2.0)


def test_single_voxel_axis_distance():
    grid = small_grid()
    grid.occupancy[2, 5, 5] = True
    edf = compute_edf_bruteforce(grid)
    assert edf.dist[5, 5, 5] == pytest.approx(0.3, abs=1e-12)
    assert edf.dist[2, 5, 5] == 0.0


def test_two_seeds_take_the_minimum():
    grid = small_grid()
    fields = []
    for idx in [(1, 2, 3), (9, 8, 4)]:
        single = small_grid()
        single.occupancy[idx] = True
        grid.occupancy[idx] = True
        fields.append(compute_edf_bruteforce(single, 0.7).dist)
    np.testing.assert_allclose(compute_edf_bruteforce(grid, 0.7).dist, np.minimum(*fields), atol=1e-12)


def test_bruteforce_matches_pairwise_definition():
    rng = np.random.default_rng(0)
    grid = small_grid(10)
    grid.occupancy[:] = rng.random(grid.dims) < 0.01
    edf = compute_edf_bruteforce(grid, 0.5)
    np.testing.assert_allclose(edf.dist, pairwise_field(grid, 0.5), atol=1e-12)


def test_field_invariants():
    rng = np.random.default_rng(1)
    grid = small_grid(14)
    for _ in range(3):
        set_box_obstacle(grid, *random_box(rng, grid))
    edf = compute_edf_bruteforce(grid, 1.0)
    assert np.all((edf.dist >= 0) & (edf.dist <= 1.0))
    assert np.all(edf.dist[grid.occupancy] == 0.0)
    flat = edf.dist.ravel()
    a, b = rng.integers(0, grid.size, size=(2, 2000))
    gap = np.linalg.norm(grid.flat_centers(a) - grid.flat_centers(b), axis=1)
    assert np.all(np.abs(flat[a] - flat[b]) <= gap + 1e-12)


# ---------------------------------------------------------------- incremental


def test_empty_change_set_is_bitwise_noop():
    grid = small_grid()
    set_box_obstacle(grid, [0.2, 0.2, 0.2], [0.4, 0.4, 0.4])
    edf = VoxelEdf.from_grid(grid, 0.6)
    before = edf.dist.copy()
    update_edf_incremental(edf, [])
    assert edf.dist.tobytes() == before.tobytes()


def test_single_insertion_matches_bruteforce():
    grid = small_grid()
    edf = VoxelEdf.empty(grid, 0.6)
    changed = set_box_obstacle(grid, [0.55, 0.55, 0.55], [0.56, 0.56, 0.56])
    update_edf_incremental(edf, changed)
    np.testing.assert_allclose(edf.dist, compute_edf_bruteforce(grid, 0.6).dist, atol=1e-9)


ops = st.lists(
    st.tuples(
        st.tuples(*[st.floats(-0.2, 1.6)] * 3),
        st.tuples(*[st.floats(0.0, 0.7)] * 3),
        st.booleans(),
    ),
    min_size=1,
    max_size=12,
)


@settings(max_examples=40, deadline=None)
@given(ops, st.sampled_from([0.3, 0.5, 2.0]))
def test_incremental_equals_bruteforce(sequence, d_max):
    grid = small_grid(16)
    edf = VoxelEdf.empty(grid, d_max)
    for lo, size, occupied in sequence:
        lo = np.asarray(lo)
        changed = set_box_obstacle(grid, lo, lo + np.asarray(size), occupied)
        update_edf_incremental(edf, changed)
        np.testing.assert_allclose(edf.dist, compute_edf_bruteforce(grid, d_max).dist, atol=1e-9)


def test_monotone_under_insertion_and_removal():
    rng = np.random.default_rng(2)
    grid = small_grid(16)
    edf = VoxelEdf.empty(grid, 0.8)
    for _ in range(20):
        occupied = bool(rng.random() < 0.6)
        before = edf.dist.copy()
        update_edf_incremental(edf, set_box_obstacle(grid, *random_box(rng, grid), occupied))
        if occupied:
            assert np.all(edf.dist <= before + 1e-12)
        else:
            assert np.all(edf.dist >= before - 1e-12)


def test_epoch_refreshes_query_snapshot():
    grid = small_grid()
    edf = VoxelEdf.empty(grid, 1.0)
    p = np.array([0.55, 0.55, 0.55])
    assert query_distance(edf, p) == 1.0
    update_edf_incremental(edf, set_box_obstacle(grid, p, p))
    assert query_distance(edf, p) == 0.0


# ---------------------------------------------------------------- queries


@pytest.fixture
def seeded_edf():
    grid = small_grid(16)
    set_box_obstacle(grid, [0.3, 0.4, 0.5], [0.6, 0.7, 0.8])
    set_box_obstacle(grid, [1.1, 0.2, 1.2], [1.3, 0.3, 1.3])
    return compute_edf_bruteforce(grid, 0.8)


def test_voxel_center_returns_stored_value(seeded_edf):
    grid = seeded_edf.grid
    idx = np.indices(grid.dims).reshape(3, -1).T[::37]
    np.testing.assert_allclose(query_distance(seeded_edf, grid.center(idx)), seeded_edf.dist[tuple(idx.T)],
                               atol=1e-14)


def test_midpoint_is_mean(seeded_edf):
    a, b = np.array([4, 7, 9]), np.array([5, 7, 9])
    p = 0.5 * (seeded_edf.grid.center(a) + seeded_edf.grid.center(b))
    assert query_distance(seeded_edf, p) == pytest.approx(0.5 * (seeded_edf.dist[4, 7, 9] + seeded_edf.dist[5, 7, 9]),
                                                          abs=1e-14)


def test_outside_grid_is_d_max_with_zero_gradient(seeded_edf):
    p = np.array([-0.3, 0.5, 0.5])
    assert query_distance(seeded_edf, p) == 0.8
    np.testing.assert_array_equal(query_gradient(seeded_edf, p), 0.0)


def test_uniform_field_has_zero_gradient():
    edf = VoxelEdf.empty(small_grid(), 2.0)
    rng = np.random.default_rng(3)
    np.testing.assert_array_equal(query_gradient(edf, rng.uniform(0.1, 1.1, size=(50, 3))), 0.0)


def test_linear_field_gradient():
    grid = small_grid(6)
    edf = VoxelEdf.empty(grid, 2.0)
    edf.dist = 0.3 * np.indices(grid.dims)[0] + 0.1
    edf.epoch += 1
    np.testing.assert_allclose(query_gradient(edf, [0.27, 0.31, 0.33]), [3.0, 0.0, 0.0], atol=1e-12)


def test_gradient_matches_finite_differences(seeded_edf):
    rng = np.random.default_rng(4)
    grid = seeded_edf.grid
    h = 1e-5
    points = rng.uniform(grid.origin + 0.05 + h, grid.upper - 0.05 - h, size=(1000, 3))
    # keep samples away from cell faces where the interpolant has a kink
    frac = (points - grid.origin) / grid.resolution - 0.5
    frac -= np.floor(frac)
    points = points[np.all((frac > 1e-3) & (frac < 1 - 1e-3), axis=1)]
    grads = query_gradient(seeded_edf, points)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (query_distance(seeded_edf, points + e) - query_distance(seeded_edf, points - e)) / (2 * h)
        np.testing.assert_allclose(grads[:, axis], fd, atol=1e-4)


def test_continuous_across_cell_faces(seeded_edf):
    rng = np.random.default_rng(5)
    grid = seeded_edf.grid
    for _ in range(200):
        p = rng.uniform(grid.origin + 0.1, grid.upper - 0.1)
        axis = rng.integers(3)
        face = (np.round((p[axis] - grid.origin[axis]) / grid.resolution - 0.5) + 0.5) * grid.resolution
        p[axis] = grid.origin[axis] + face
        below, above = p.copy(), p.copy()
        below[axis] = np.nextafter(p[axis], -np.inf)
        above[axis] = np.nextafter(p[axis], np.inf)
        assert abs(query_distance(seeded_edf, below) - query_distance(seeded_edf, above)) < 1e-12
