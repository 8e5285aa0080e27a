import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamsdf.geometry import (
    DepthFrame,
    DepthSamplingConfig,
    Intrinsics,
    Pose,
    backproject,
    project,
    sample_depths,
    sample_frame,
    sample_pixels,
    surface_normals,
)

INTR = Intrinsics(100.0, 100.0, 49.5, 39.5, 100, 80)


def test_principal_point_backprojects_to_optical_axis():
    ray_cam, ray_world = backproject(INTR, Pose.identity(), 49.5, 39.5)
    np.testing.assert_allclose(ray_cam, [0, 0, 1])
    np.testing.assert_allclose(ray_world, [0, 0, 1])


def test_backproject_out_of_bounds():
    with pytest.raises(IndexError):
        backproject(INTR, Pose.identity(), 100, 0)


@settings(max_examples=30)
@given(st.floats(0, 99), st.floats(0, 79), st.floats(0.1, 10))
def test_project_inverts_backproject(u, v, d):
    pose = Pose.look_at([1, 2, 1], [0, 0, 0.5])
    ray_cam, _ = backproject(INTR, pose, u, v)
    x = pose.apply(ray_cam * d)
    uu, vv, z = project(INTR, pose, x)
    np.testing.assert_allclose([uu, vv, z], [u, v, d], atol=1e-9)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1, 1, 2.0]), np.zeros(3))


def test_depth_sampling_structure():
    cfg = DepthSamplingConfig()
    rng = np.random.default_rng(0)
    D = np.array([1.0, 2.5, 0.05])
    d = sample_depths(D, cfg, rng)
    assert d.shape == (3, 29)
    assert np.all(np.isnan(d[2]))
    for r, Dr in enumerate(D[:2]):
        row = d[r]
        assert row[-1] == Dr
        width = (Dr + cfg.delta - cfg.d_min) / cfg.n_stratified
        bins = np.floor((row[:20] - cfg.d_min) / width).astype(int)
        assert list(bins) == list(range(20))
        assert np.all((row[20:28] >= cfg.d_min) & (row[20:28] <= Dr + cfg.delta))


def test_depth_sampling_gaussian_spread():
    cfg = DepthSamplingConfig()
    d = sample_depths(np.full(20000, 3.0), cfg, np.random.default_rng(1), include_surface=False)
    g = d[:, 20:]
    # clamping at D + delta (one sigma) moves mass onto the edge but not the median
    assert abs(np.median(g) - 3.0) < 0.005
    assert abs(np.mean(g == 3.1) - 0.1587) < 0.005


def test_pixels_only_valid():
    depth = np.full((80, 100), np.nan)
    depth[10, 20] = 1.0
    depth[30, 40] = 2.0
    fr = DepthFrame(depth, Pose.identity(), INTR)
    pix = sample_pixels(fr, 200, np.random.default_rng(0))
    assert set(map(tuple, pix)) == {(20, 10), (40, 30)}
    fr_empty = DepthFrame(np.zeros((80, 100)), Pose.identity(), INTR)
    with pytest.raises(ValueError):
        sample_pixels(fr_empty, 1, np.random.default_rng(0))


def _plane_frame(dist=2.0):
    depth = np.full((80, 100), dist)
    return DepthFrame(depth, Pose.identity(), INTR)


def test_normals_of_fronto_parallel_plane():
    n = surface_normals(_plane_frame())
    inner = n[1:-1, 1:-1].reshape(-1, 3)
    np.testing.assert_allclose(inner, np.tile([0, 0, -1.0], (len(inner), 1)), atol=1e-9)
    assert np.all(np.isnan(n[0])) and np.all(np.isnan(n[:, -1]))


def test_normals_invalid_next_to_holes():
    fr = _plane_frame()
    fr.depth[40, 50] = np.nan
    n = surface_normals(fr)
    assert np.all(np.isnan(n[40, 49])) and np.all(np.isnan(n[39, 50]))
    np.testing.assert_allclose(np.linalg.norm(n[20, 20]), 1.0, atol=1e-6)


def test_sample_frame_points_on_rays():
    fr = _plane_frame(2.0)
    b = sample_frame(fr, 50, DepthSamplingConfig(), np.random.default_rng(0), surface_normals(fr))
    assert len(b) == 50 * 29
    np.testing.assert_allclose(b.points[:, 2], b.depth, atol=1e-12)
    np.testing.assert_allclose(b.points[b.is_surface, 2], 2.0)
    np.testing.assert_allclose(np.linalg.norm(b.ray_dirs, axis=1), 1.0)
    assert b.is_surface.sum() == 50
    np.testing.assert_allclose(b.depth_gap, b.measured - b.depth)
