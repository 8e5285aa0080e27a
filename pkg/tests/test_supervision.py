import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_nearest
from streamsdf.geometry import DepthSamplingConfig, SampleBatch, sample_frame
from streamsdf.supervision import (
    BoundMethod,
    LossConfig,
    approx_gradient,
    batch_bound,
    compute_supervision,
    eik_loss,
    free_space_loss,
    grad_loss,
    nearest_surface,
    normal_bound,
    ray_bound,
    sdf_loss,
    total_loss,
)


def test_nearest_surface_matches_bruteforce():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(300, 3))
    surf = rng.normal(size=(40, 3))
    d, j = nearest_surface(pts, surf, k=3)
    bd, bj = brute_nearest(pts, surf)
    np.testing.assert_array_equal(j, bj)
    np.testing.assert_allclose(d, bd, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_nearest_surface_matches_bruteforce_with_many_ties(seed, m):
    # integer lattice points make equidistant candidates common
    rng = np.random.default_rng(seed)
    surf = rng.integers(-2, 3, size=(m, 3)).astype(float)
    pts = rng.integers(-3, 4, size=(50, 3)).astype(float)
    d, j = nearest_surface(pts, surf, k=2)
    bd, bj = brute_nearest(pts, surf)
    np.testing.assert_array_equal(j, bj)
    np.testing.assert_array_equal(d, bd)


def test_nearest_surface_tie_goes_to_lowest_index():
    surf = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    d, j = nearest_surface(np.zeros((1, 3)), surf)
    assert j[0] == 0 and d[0] == 1.0


def test_bound_ordering_on_rendered_frame(frame, frame_normals, scene):
    b = sample_frame(frame, 200, DepthSamplingConfig(), np.random.default_rng(0), frame_normals)
    rb = ray_bound(b)
    bb, _ = batch_bound(b)
    nb, used = normal_bound(b, 0.30)
    assert np.all(np.abs(bb) <= np.abs(rb) + 1e-12)
    assert np.all(np.abs(nb[used]) <= np.abs(rb[used]) + 1e-12)
    s = scene.sdf(b.points)
    for bound in (rb, bb):
        assert np.mean(np.abs(s) <= np.abs(bound) + 0.01) > 0.99


def test_normal_bound_soundness_on_rendered_frame(frame, frame_normals, scene):
    # past a convex edge the tangent plane is nearer than the surface, so the bound
    # drops below the true distance; known to fall short
    b = sample_frame(frame, 200, DepthSamplingConfig(), np.random.default_rng(0), frame_normals)
    nb, _ = normal_bound(b, 0.30)
    s = scene.sdf(b.points)
    assert np.mean(np.abs(s) <= np.abs(nb) + 0.01) > 0.99


def test_ray_bound_sign_and_zero_on_surface(raw_batch):
    rb = ray_bound(raw_batch)
    assert np.all(rb[raw_batch.is_surface] == 0)
    assert np.all(np.sign(rb[~raw_batch.is_surface]) == np.sign(raw_batch.depth_gap[~raw_batch.is_surface]))


def test_approx_gradient_points_away_from_surface(raw_batch):
    b, near = batch_bound(raw_batch)
    g = approx_gradient(raw_batch, near)
    free = ~raw_batch.is_surface & (b > 0)
    # moving along g from x increases the distance to the nearest surface point
    x = raw_batch.points[free]
    assert np.all(np.linalg.norm(x + 1e-3 * g[free] - near[free], axis=1) >= np.linalg.norm(x - near[free], axis=1))
    surf_g = g[raw_batch.is_surface]
    ok = np.any(surf_g != 0, axis=1)
    np.testing.assert_allclose(np.linalg.norm(surf_g[ok], axis=1), 1.0, atol=1e-9)


def test_free_space_loss_values():
    assert free_space_loss(0.5, 1.0) == 0.0
    assert free_space_loss(1.5, 1.0) == pytest.approx(0.5)
    assert free_space_loss(-0.2, 1.0) == pytest.approx(np.exp(1.0) - 1)


def test_sdf_loss_branches():
    cfg = LossConfig()
    assert sdf_loss(0.3, 0.25, 0.05, cfg) == pytest.approx(5 * 0.05)
    assert sdf_loss(0.3, 0.25, 0.5, cfg) == pytest.approx(0.05)


def test_grad_loss_values():
    assert grad_loss([1, 0, 0], [2, 0, 0])[0] == pytest.approx(0)
    assert grad_loss([1, 0, 0], [0, 1, 0])[0] == pytest.approx(1)
    assert grad_loss([1, 0, 0], [-1, 0, 0])[0] == pytest.approx(2)
    assert np.isnan(grad_loss([0, 0, 0], [1, 0, 0])[0])


def test_eik_loss_mask():
    out = eik_loss(np.array([[2.0, 0, 0], [2.0, 0, 0]]), np.array([0.05, 0.5]), 0.1)
    np.testing.assert_array_equal(out, [0.0, 1.0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-1, 1))
def test_sdf_loss_nonnegative(f, b, gap):
    assert sdf_loss(f, b, gap, LossConfig()) >= 0


def test_total_loss_derivatives_match_fd(raw_batch):
    b = compute_supervision(raw_batch, BoundMethod("batch"))
    rng = np.random.default_rng(0)
    f = rng.normal(0, 0.3, len(b))
    G = rng.normal(size=(len(b), 3))
    cfg = LossConfig()
    L = total_loss(b, f, G, cfg)
    h = 1e-6
    for i in rng.choice(len(b), 10, replace=False):
        fp, fm = f.copy(), f.copy()
        fp[i] += h
        fm[i] -= h
        fd = (total_loss(b, fp, G, cfg).total - total_loss(b, fm, G, cfg).total) / (2 * h)
        assert fd == pytest.approx(L.f_bar[i], rel=1e-4, abs=1e-9)
        for a in range(3):
            Gp, Gm = G.copy(), G.copy()
            Gp[i, a] += h
            Gm[i, a] -= h
            fd = (total_loss(b, f, Gp, cfg).total - total_loss(b, f, Gm, cfg).total) / (2 * h)
            assert fd == pytest.approx(L.grad_bar[i, a], rel=1e-4, abs=1e-9)


def test_total_loss_rejects_nonfinite(raw_batch):
    b = compute_supervision(raw_batch, BoundMethod("ray"))
    f = np.zeros(len(b))
    f[3] = np.nan
    with pytest.raises(FloatingPointError, match="sdf"):
        total_loss(b, f, np.ones((len(b), 3)), LossConfig())


def test_batch_without_surface_samples_rejected(raw_batch):
    b = raw_batch.take(np.nonzero(~raw_batch.is_surface)[0])
    with pytest.raises(ValueError):
        compute_supervision(b, BoundMethod("batch"))


def test_normal_mode_reports_fallbacks(raw_batch):
    b = compute_supervision(raw_batch, BoundMethod("normal"))
    assert b.diagnostics["normal_fallbacks"] == int((~np.isfinite(raw_batch.normals).all(axis=1)).sum())
    assert isinstance(SampleBatch.concat([raw_batch]), SampleBatch)
