import math

import numpy as np
import pytest

from relocreg import ndt
from relocreg.core import PointCloud, RigidTransform, invert, rotation_angle, unpack_sym
from relocreg.errors import EmptyInput, GridEmpty, ParamError
from relocreg.ndt import NdtParams, build_grid, gaussian_log_density, increment, refine, score
from relocreg.synthgen import SceneParams, generate_scene

from conftest import random_rigid


def _independent_log_density(x, mean, cov):
    # written from the multivariate normal formula with a Cholesky solve
    k = len(x)
    l = np.linalg.cholesky(cov)
    z = np.linalg.solve(l, np.asarray(x) - mean)
    logdet = 2.0 * np.log(np.diag(l)).sum()
    return -0.5 * (k * math.log(2 * math.pi) + logdet + z @ z)


def test_density_at_mean_identity_covariance():
    cov = np.eye(3)
    val = gaussian_log_density(np.zeros(3), np.zeros(3), cov, -1.5 * math.log(2 * math.pi))
    assert val == pytest.approx(-2.7568, abs=5e-5)
    assert val == pytest.approx(math.log((2 * math.pi) ** -1.5), abs=1e-15)


def test_grid_density_matches_independent_formula(rng):
    # one well-populated voxel per draw; the grid's own Gaussian evaluated at random x
    for _ in range(20):
        a = rng.normal(size=(3, 3))
        pts = rng.normal(size=(200, 3)) @ a.T * 0.05 + 0.5
        pts = pts[(pts >= 0).all(axis=1) & (pts < 1).all(axis=1)]
        grid = build_grid(PointCloud(pts), NdtParams(voxel_size=1.0, eps_rel=1e-6))
        assert len(grid) == 1
        cov = unpack_sym(grid.covariances[0])
        icov = unpack_sym(grid.inv_covariances[0])
        for x in rng.uniform(0, 1, size=(10, 3)):
            got = gaussian_log_density(x, grid.means[0], icov, grid.log_norm[0])
            assert got == pytest.approx(_independent_log_density(x, grid.means[0], cov), rel=1e-12, abs=1e-12)


def test_voxel_statistics_match_sample_oracle(rng):
    pts = rng.uniform(0, 4, size=(4000, 3))
    params = NdtParams(voxel_size=1.0, eps_rel=1e-9)
    grid = build_grid(PointCloud(pts), params)
    for row in range(len(grid)):
        key = grid.keys[row]
        members = pts[(np.floor(pts / 1.0) == key).all(axis=1)]
        assert len(members) == grid.counts[row]
        np.testing.assert_allclose(grid.means[row], members.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(unpack_sym(grid.covariances[row]), np.cov(members.T, ddof=1), atol=1e-9)


def test_min_points_threshold():
    five = np.full((5, 3), 0.5)
    with pytest.raises(GridEmpty):
        build_grid(PointCloud(five), NdtParams(voxel_size=1.0, min_points=6))
    pts = np.vstack([five, np.full((6, 3), 2.5)])
    grid = build_grid(PointCloud(pts), NdtParams(voxel_size=1.0, min_points=6))
    assert len(grid) == 1 and tuple(grid.keys[0]) == (2, 2, 2)


def test_coincident_points_get_floor():
    grid = build_grid(PointCloud(np.full((6, 3), 0.25)), NdtParams(voxel_size=1.0))
    np.testing.assert_array_equal(grid.means[0], [0.25, 0.25, 0.25])
    np.testing.assert_allclose(unpack_sym(grid.covariances[0]), 1e-3 * np.eye(3), rtol=1e-12)


def test_conditioned_covariances_positive_definite(rng):
    plane = np.column_stack([rng.uniform(0, 3, (3000, 2)), np.zeros(3000)])
    params = NdtParams(voxel_size=1.0)
    grid = build_grid(PointCloud(plane), params)
    for row in range(len(grid)):
        w = np.linalg.eigvalsh(unpack_sym(grid.covariances[row]))
        assert w[0] >= params.eps_rel * w[-1] - 1e-12
        prod = unpack_sym(grid.covariances[row]) @ unpack_sym(grid.inv_covariances[row])
        np.testing.assert_allclose(prod, np.eye(3), atol=1e-6)


def test_empty_source():
    with pytest.raises(EmptyInput):
        build_grid(PointCloud(np.zeros((0, 3))), NdtParams())


def test_outside_support_scores_zero(rng):
    grid = build_grid(PointCloud(rng.uniform(0, 2, (500, 3))), NdtParams(voxel_size=1.0))
    s, g = score(grid, rng.uniform(100, 101, (50, 3)), RigidTransform.identity())
    assert s == 0.0 and not g.any()


def test_score_is_sum_of_densities(rng):
    pts = rng.uniform(0, 2, (800, 3))
    grid = build_grid(PointCloud(pts), NdtParams(voxel_size=1.0))
    t = random_rigid(rng, max_angle_deg=5, max_shift=0.1)
    q = rng.uniform(0, 2, (100, 3))
    x = t.transform_points(q)
    expect = 0.0
    for xi in x:
        key = np.floor(xi)
        rows = np.flatnonzero((grid.keys == key).all(axis=1))
        if len(rows):
            r = rows[0]
            expect += _independent_log_density(xi, grid.means[r], unpack_sym(grid.covariances[r]))
    assert score(grid, q, t)[0] == pytest.approx(expect, rel=1e-12)


@pytest.fixture(scope="module")
def tunnel():
    return generate_scene(SceneParams(length=10.0, density=25.0, junctions=1, seed=3))


def _fd_gradient(grid, pts, t, h=1e-6):
    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (score(grid, pts, increment(t, e))[0] - score(grid, pts, increment(t, -e))[0]) / (2 * h)
    return g


def _stable_membership(grid, pts, t, h=1e-6):
    base = grid.lookup(t.transform_points(pts))
    for k in range(6):
        for sgn in (1, -1):
            e = np.zeros(6)
            e[k] = sgn * h
            if not np.array_equal(grid.lookup(increment(t, e).transform_points(pts)), base):
                return False
    return True


def test_gradient_matches_finite_differences(tunnel, rng):
    params = NdtParams(voxel_size=0.8)
    grid = build_grid(tunnel, params)
    pts = tunnel.points[::7]
    checked = 0
    while checked < 15:
        t = random_rigid(rng, max_angle_deg=3, max_shift=0.3)
        if not _stable_membership(grid, pts, t):
            continue
        _, g = score(grid, pts, t)
        fd = _fd_gradient(grid, pts, t)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4
        checked += 1


def test_refine_identity_stays_put(tunnel):
    grid = build_grid(tunnel, NdtParams(voxel_size=0.8))
    res = refine(grid, tunnel, RigidTransform.identity(), NdtParams(voxel_size=0.8))
    assert np.linalg.norm(res.transform.translation) < 0.02
    assert np.degrees(rotation_angle(res.transform.rotation)) < 0.2
    assert res.final_score >= res.initial_score
    assert res.converged


def _blobs(rng):
    # volumetric clusters, so every voxel Gaussian is full rank
    centers = rng.uniform(0, 6, (40, 3))
    return np.vstack([c + rng.normal(0, 0.25, (150, 3)) * rng.uniform(0.5, 1.5, 3) for c in centers])


def test_refine_recovers_half_voxel_shift():
    gen = np.random.default_rng(5)
    pts = _blobs(gen)
    params = NdtParams(voxel_size=0.8)
    grid = build_grid(PointCloud(pts), params)
    for _ in range(20):
        d = gen.normal(size=3)
        d *= 0.5 * params.voxel_size / np.linalg.norm(d)
        target = invert(RigidTransform(np.eye(3), d)).transform_points(pts)
        res = refine(grid, target, RigidTransform.identity(), params)
        assert np.linalg.norm(res.transform.translation - d) < 0.1 * params.voxel_size
        assert all(b >= a for a, b in zip(res.scores, res.scores[1:]))


def test_refine_reduces_tunnel_offset(tunnel, rng):
    # thin wall voxels make the likelihood steep across the wall and flat along
    # it, so plain ascent stalls short of the optimum; it must still improve
    params = NdtParams(voxel_size=0.8)
    grid = build_grid(tunnel, params)
    for _ in range(10):
        d = rng.normal(size=3)
        d *= 0.4 / np.linalg.norm(d)
        target = invert(RigidTransform(np.eye(3), d)).transform_points(tunnel.points)
        res = refine(grid, target, RigidTransform.identity(), params)
        assert np.linalg.norm(res.transform.translation - d) < 0.4
        assert res.final_score > res.initial_score


def test_refine_far_outside_support(tunnel):
    params = NdtParams(voxel_size=0.8)
    grid = build_grid(tunnel, params)
    far = RigidTransform(np.eye(3), [500.0, 0, 0])
    res = refine(grid, tunnel, far, params)
    assert res.transform is far and res.iterations == 0 and not res.converged


def test_refine_scores_non_decreasing(tunnel, rng):
    params = NdtParams(voxel_size=0.8)
    grid = build_grid(tunnel, params)
    for _ in range(5):
        res = refine(grid, tunnel.points[::3], random_rigid(rng, max_angle_deg=5, max_shift=0.5), params)
        assert all(b >= a for a, b in zip(res.scores, res.scores[1:]))
        assert res.final_score >= res.initial_score


def test_params_validation():
    with pytest.raises(ParamError):
        NdtParams(min_points=1)
    with pytest.raises(ParamError):
        NdtParams(eps_rel=0)
    assert NdtParams.for_resolution(0.1).voxel_size == pytest.approx(0.4)


def test_backends_agree_on_score(tunnel, rng, kernel_module, monkeypatch):
    grid = build_grid(tunnel, NdtParams(voxel_size=0.8))
    t = random_rigid(rng, max_angle_deg=3, max_shift=0.3)
    monkeypatch.setattr(ndt, "kernels", kernel_module)
    s, g = score(grid, tunnel, t)
    monkeypatch.undo()
    s0, g0 = score(grid, tunnel, t)
    assert s == pytest.approx(s0, rel=1e-12)
    np.testing.assert_allclose(g, g0, rtol=1e-9, atol=1e-9)
