import jax
import jax.numpy as jnp
import numpy as np
import pytest

from cranempc import collision, crane
from cranempc.collision import (
    CollisionModel,
    decompose_links,
    link_signed_distance,
    signed_distance_gradient,
    signed_distances,
    sphere_count,
)
from cranempc.edf import VoxelEdf, VoxelGrid, compute_edf_bruteforce, query_distance, set_box_obstacle


def config(qA, params):
    return crane.hanging_equilibrium(params, np.asarray(qA, dtype=float))


@pytest.fixture(scope="module")
def model(params):
    return CollisionModel.build(params)


@pytest.fixture(scope="module")
def cluttered(params):
    grid = VoxelGrid.from_bounds([-1.0, -8.0, -4.0], [10.0, 8.0, 7.0], 0.2)
    set_box_obstacle(grid, [5.0, 0.5, -1.0], [7.0, 1.5, 2.5])
    set_box_obstacle(grid, [3.0, -2.0, 2.0], [4.0, -1.0, 3.0])
    set_box_obstacle(grid, [6.5, -1.2, -3.0], [7.2, -0.6, 0.5])
    return compute_edf_bruteforce(grid, 2.0)


# ---------------------------------------------------------------- decomposition


@pytest.mark.parametrize("extension, count", [(0.0, 9), (2.0, 14)])
def test_arm_sphere_count_follows_telescope(params, extension, count):
    spheres = decompose_links(params, config([0, 0.5, -1, extension, 0], params))
    assert len(spheres.centers[1]) == count == sphere_count(3.0 + extension, 0.4)


def test_spheres_cover_their_segments(params, model):
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.uniform(params.q_min, params.q_max)
        spheres = decompose_links(params, q, model)
        for i in range(3):
            gaps = np.diff(spheres.offsets[i])
            assert np.all(gaps <= model.spacing + 1e-12)
            assert np.all(gaps / 2 <= model.radii[i])
            assert np.all(spheres.radii[i] > 0)
            length = model.lengths[i] + (q[3] if model.telescopic[i] else 0.0)
            assert spheres.offsets[i][0] == 0.0
            assert spheres.offsets[i][-1] == pytest.approx(length)


def test_centers_lie_on_link_centerline(params, model):
    q = np.random.default_rng(1).uniform(params.q_min, params.q_max)
    poses = crane.forward_kinematics(params, q)
    spheres = decompose_links(params, q, model)
    for i, frame in enumerate(model.frames):
        T = poses[frame]
        expected = T[:3, 3] + np.outer(spheres.offsets[i], T[:3, :3] @ model.directions[i])
        np.testing.assert_allclose(spheres.centers[i], expected, atol=1e-12)


def test_radii_inflated_by_half_voxel(params):
    spheres = decompose_links(params, np.zeros(7), CollisionModel.build(params, resolution=0.2))
    for i, radius in enumerate((0.25, 0.20, 0.45)):
        np.testing.assert_allclose(spheres.radii[i], radius + 0.1)


def test_gripper_set_spans_both_pendulum_links(params):
    q = config([0.2, 0.4, -1.0, 1.0, 0.3], params)
    spheres = decompose_links(params, q)
    poses = crane.forward_kinematics(params, q)
    np.testing.assert_allclose(spheres.centers[2][0], poses[5][:3, 3], atol=1e-12)
    com = poses[6][:3, :3] @ params.link_com[6] + poses[6][:3, 3]
    assert np.min(np.linalg.norm(spheres.centers[2] - com, axis=1)) < 1e-12


def test_slew_rotation_is_rigid(params, model):
    q = np.random.default_rng(2).uniform(params.q_min, params.q_max)
    turned = q.copy()
    turned[0] += 0.7
    c, s = np.cos(0.7), np.sin(0.7)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    a, b = decompose_links(params, q, model), decompose_links(params, turned, model)
    for i in range(3):
        np.testing.assert_allclose(b.centers[i], a.centers[i] @ Rz.T, atol=1e-12)
        np.testing.assert_array_equal(a.radii[i], b.radii[i])


# ---------------------------------------------------------------- signed distance


def test_empty_map_single_sphere():
    edf = VoxelEdf.empty(VoxelGrid(np.zeros(3), 0.1, (10, 10, 10)), 2.0)
    assert link_signed_distance(edf, [[0.5, 0.5, 0.5]], [0.3]) == (pytest.approx(1.7), 0)


def _constant_edf(values_at):
    grid = VoxelGrid(np.zeros(3), 0.1, (10, 10, 10))
    edf = VoxelEdf.empty(grid, 2.0)
    for idx, value in values_at.items():
        edf.dist[idx] = value
    edf.epoch += 1
    return edf, grid


def test_direct_substitution():
    edf, grid = _constant_edf({(2, 2, 2): 0.5})
    sd, j = link_signed_distance(edf, [grid.center((2, 2, 2))], [0.3])
    assert sd == pytest.approx(0.2, abs=1e-14) and j == 0


def test_minimizing_sphere_is_reported():
    edf, grid = _constant_edf({(2, 2, 2): 0.5, (7, 7, 7): 0.4})
    sd, j = link_signed_distance(edf, [grid.center((2, 2, 2)), grid.center((7, 7, 7))], [0.3, 0.25])
    assert sd == pytest.approx(0.15, abs=1e-14) and j == 1


def test_ties_break_to_lowest_index():
    edf, grid = _constant_edf({})
    assert link_signed_distance(edf, np.full((4, 3), 0.5), 0.3)[1] == 0


def test_empty_sphere_list_rejected():
    edf, _ = _constant_edf({})
    with pytest.raises(ValueError):
        link_signed_distance(edf, np.zeros((0, 3)), [])


def test_traced_distances_match_sphere_sets(params, model, cluttered):
    rng = np.random.default_rng(3)
    for _ in range(10):
        q = rng.uniform(params.q_min, params.q_max)
        spheres = decompose_links(params, q, model)
        expected = [link_signed_distance(cluttered, c, r)[0] for c, r in zip(spheres.centers, spheres.radii)]
        np.testing.assert_allclose(signed_distances(params, cluttered, q, model), expected, atol=1e-12)


def test_conservative_along_centerline(params, model, cluttered):
    rng = np.random.default_rng(4)
    for _ in range(30):
        q = rng.uniform(params.q_min, params.q_max)
        spheres = decompose_links(params, q, model)
        for centers, radii in zip(spheres.centers, spheres.radii):
            t = rng.random(50)
            seg = rng.integers(0, len(centers) - 1, size=50)
            points = centers[seg] + t[:, None] * (centers[seg + 1] - centers[seg])
            nearest = np.where(t < 0.5, seg, seg + 1)
            sd = query_distance(cluttered, centers[nearest]) - radii[nearest]
            assert np.all(query_distance(cluttered, points) >= sd - 1e-12)


def test_sd_lipschitz_in_sphere_center(cluttered):
    rng = np.random.default_rng(5)
    grid = cluttered.grid
    for _ in range(200):
        centers = rng.uniform(grid.origin + 0.5, grid.upper - 0.5, size=(6, 3))
        radii = rng.uniform(0.2, 0.5, size=6)
        k = rng.integers(6)
        direction = np.eye(3)[rng.integers(3)] * rng.choice([-1.0, 1.0])
        step = rng.uniform(1e-3, 0.5)
        moved = centers.copy()
        moved[k] += step * direction
        a = link_signed_distance(cluttered, centers, radii)[0]
        b = link_signed_distance(cluttered, moved, radii)[0]
        assert abs(a - b) <= step + 1e-12


# ---------------------------------------------------------------- gradients


def test_empty_map_gradient_is_zero(params):
    edf = VoxelEdf.empty(VoxelGrid.from_bounds([-1.0, -8.0, -4.0], [10.0, 8.0, 7.0], 0.2))
    q = config([0.1, 0.4, -1.0, 1.0, 0.0], params)
    for link in range(3):
        np.testing.assert_array_equal(signed_distance_gradient(edf, params, q, link), 0.0)


def test_boom_ignores_downstream_joints(params, cluttered):
    rng = np.random.default_rng(6)
    for _ in range(20):
        q = rng.uniform(params.q_min, params.q_max)
        np.testing.assert_array_equal(signed_distance_gradient(cluttered, params, q, 0)[2:], 0.0)
        np.testing.assert_array_equal(signed_distance_gradient(cluttered, params, q, 1)[4:], 0.0)


def _minimizers(params, model, field, q):
    Rs, ps = crane._fk(params, q)
    radii = model.radii + model.inflation
    out = []
    for i in range(3):
        centers, _, mask = collision._link_spheres(params, model, Rs, ps, q, i)
        out.append(collision._link_sd(field, centers, mask, radii[i])[1])
    return jnp.stack(out)


def test_gradient_matches_finite_differences(params, model):
    """500 (q, map) pairs, skipping perturbations that switch the minimizing sphere."""
    rng = np.random.default_rng(7)
    h = 1e-6
    sd_fn = jax.jit(lambda field, q: collision.link_distances(params, model, field, q))
    grad_fn = jax.jit(jax.jacfwd(lambda field, q: collision.link_distances(params, model, field, q), argnums=1))
    arg_fn = jax.jit(lambda field, q: _minimizers(params, model, field, q))
    checked = 0
    for _ in range(10):
        grid = VoxelGrid.from_bounds([-1.0, -8.0, -4.0], [10.0, 8.0, 7.0], 0.2)
        for _ in range(4):
            lo = rng.uniform([1.0, -6.0, -3.0], [8.0, 5.0, 4.0])
            set_box_obstacle(grid, lo, lo + rng.uniform(0.3, 2.0, size=3))
        field = compute_edf_bruteforce(grid, 2.0).field()
        for _ in range(50):
            q = rng.uniform(params.q_min, params.q_max)
            J = np.asarray(grad_fn(field, q))
            base = np.asarray(arg_fn(field, q))
            for k in range(7):
                e = np.zeros(7)
                e[k] = h
                if not (np.array_equal(np.asarray(arg_fn(field, q + e)), base)
                        and np.array_equal(np.asarray(arg_fn(field, q - e)), base)):
                    continue
                fd = (np.asarray(sd_fn(field, q + e)) - np.asarray(sd_fn(field, q - e))) / (2 * h)
                np.testing.assert_allclose(J[:, k], fd, rtol=1e-4, atol=1e-4)
            checked += 1
    assert checked == 500
