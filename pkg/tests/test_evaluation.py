import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import CHOMP_FROZEN, chomp_reference, icosphere_mesh, sphere_sdf
from streamsdf.evaluation import (
    Mesh,
    SceneField,
    binned_sdf_error,
    build_eval_points,
    chomp_cost,
    collision_cost_error,
    connected_components,
    euler_characteristic,
    evaluate_field,
    export_slice,
    grad_cosine_distance,
    is_watertight,
    marching_cubes,
    read_ply,
    sdf_error,
    visible_mask,
    write_ply,
)
from streamsdf.geometry import DepthFrame, Intrinsics, Pose, project
from streamsdf.scenes import Scene, Sphere


def test_sdf_error():
    assert sdf_error(0.05, -0.01) == pytest.approx(0.06)
    assert sdf_error(0.3, 0.3) == 0


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_sdf_error_symmetric(a, b):
    assert sdf_error(a, b) == sdf_error(b, a)


def test_chomp_frozen_values():
    for s, c in CHOMP_FROZEN.items():
        assert chomp_cost(s) == pytest.approx(c, abs=1e-15)


@given(st.floats(-10, 10), st.floats(0.1, 5))
def test_chomp_matches_reference(s, eps):
    assert chomp_cost(s, eps) == pytest.approx(chomp_reference(s, eps), abs=1e-12)


def test_chomp_continuity():
    e = 2.0
    for s in (0.0, e):
        lo, hi = chomp_cost(np.nextafter(s, -1)), chomp_cost(np.nextafter(s, 10))
        assert abs(lo - hi) < 1e-12


def test_collision_cost_error():
    assert collision_cost_error(0.3, 0.3) == 0
    assert collision_cost_error(3.0, 5.0) == 0
    assert collision_cost_error(np.array([9.0]), np.array([2.0]), mapped=np.array([False]))[0] == pytest.approx(1.0)


def test_grad_cosine():
    out = grad_cosine_distance(np.array([[1, 0, 0], [1, 0, 0], [1, 0, 0], [0, 0, 0]]),
                               np.array([[2, 0, 0], [0, 1, 0], [-1, 0, 0], [1, 0, 0]]))
    np.testing.assert_allclose(out[:3], [0, 1, 2], atol=1e-12)
    assert np.isnan(out[3])


def test_bins():
    s = np.array([0.1, 0.2, 0.6, 1.9, 2.5, -0.1])
    rows = binned_sdf_error(s, np.full(6, 0.03))
    assert sum(r["count"] for r in rows) == 6
    assert all(r["mean"] == pytest.approx(0.03) for r in rows if r["count"])
    assert any(r["count"] == 0 and r["mean"] is None for r in rows)
    one = binned_sdf_error(np.array([0.1, 0.2]), np.array([0.01, 0.05]))
    assert [r["mean"] for r in one if r["count"]] == [pytest.approx(0.03)]


def test_eval_points_visible_and_repeatable(scene, frame):
    a = build_eval_points([frame], scene, n=3000, seed=4)
    b = build_eval_points([frame], scene, n=3000, seed=4)
    assert len(a) == 3000
    np.testing.assert_array_equal(a.points, b.points)
    u, v, z = project(frame.intrinsics, frame.pose, a.points)
    assert np.all(z > 0)
    assert np.all((u > -0.5) & (u < frame.intrinsics.width - 0.5) & (v > -0.5) & (v < frame.intrinsics.height - 0.5))
    assert np.all(np.isfinite(a.sdf))
    assert np.all(a.frame_ids <= a.time_index)


def test_visible_mask_wall_in_front():
    intr = Intrinsics(fx=50.0, fy=50.0, cx=31.5, cy=23.5, width=64, height=48)
    fr = DepthFrame(np.full((48, 64), 2.0), Pose.look_at((0, 0, 0), (1, 0, 0)), intr)
    pts = np.array([
        [1.5, 0, 0],    # in front of the wall
        [2.05, 0, 0],   # just behind it, inside the slack
        [2.2, 0, 0],    # occluded
        [-1.0, 0, 0],   # behind the camera
        [1.0, 5.0, 0],  # outside the image
    ])
    np.testing.assert_array_equal(visible_mask(pts, [fr]), [True, True, False, False, False])
    np.testing.assert_array_equal(visible_mask(pts, [fr], behind=0.3), [True, True, True, False, False])
    hole = DepthFrame(np.full((48, 64), np.nan), fr.pose, intr)
    assert not visible_mask(pts, [hole]).any()
    assert visible_mask(pts, [hole, fr]).tolist() == visible_mask(pts, [fr]).tolist()


def test_self_comparison_is_zero(scene, frame):
    pts = build_eval_points([frame], scene, n=2000, seed=0)
    rep = evaluate_field(pts, SceneField(scene))
    assert rep.sdf_mean == 0 and rep.collision_mean == 0 and rep.grad_mean == pytest.approx(0, abs=1e-12)


def test_slice(tmp_path):
    sc = Scene([Sphere((0, 0, 0), 0.5)], np.array([-1.0] * 3), np.array([1.0] * 3))
    vals = export_slice(sc.sdf, 0.0, (sc.bounds_min, sc.bounds_max), 0.05, tmp_path / "s")
    assert vals.shape == (40, 40)
    assert vals.min() == pytest.approx(-0.5, abs=0.05)
    csv1 = (tmp_path / "s.csv").read_bytes()
    pgm1 = (tmp_path / "s.pgm").read_bytes()
    export_slice(sc.sdf, 0.0, (sc.bounds_min, sc.bounds_max), 0.05, tmp_path / "s")
    assert (tmp_path / "s.csv").read_bytes() == csv1 and (tmp_path / "s.pgm").read_bytes() == pgm1
    assert pgm1.startswith(b"P5\n40 40\n255\n")
    assert "value_min" in (tmp_path / "s.txt").read_text()
    with pytest.raises(ValueError):
        export_slice(sc.sdf, 5.0, (sc.bounds_min, sc.bounds_max), 0.05, tmp_path / "s")


def _sphere_field(x):
    return sphere_sdf(x, 0, 1.0)


def test_marching_cubes_sphere():
    b = (np.array([-1.3] * 3), np.array([1.3] * 3))
    m = marching_cubes(_sphere_field, b, 0.02)
    assert len(m) > 0
    assert np.max(np.abs(np.linalg.norm(m.vertices, axis=1) - 1.0)) <= 0.02
    assert is_watertight(m)
    assert euler_characteristic(m) == 2
    tri = m.vertices[m.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    assert np.all(np.einsum("ij,ij->i", n, tri.mean(1)) > 0)


def test_marching_cubes_sign_flip_reverses_winding():
    b = (np.array([-1.3] * 3), np.array([1.3] * 3))
    m1 = marching_cubes(_sphere_field, b, 0.1)
    m2 = marching_cubes(lambda x: -_sphere_field(x), b, 0.1)
    tri1, tri2 = m1.vertices[m1.faces], m2.vertices[m2.faces]
    n1 = np.cross(tri1[:, 1] - tri1[:, 0], tri1[:, 2] - tri1[:, 0])
    n2 = np.cross(tri2[:, 1] - tri2[:, 0], tri2[:, 2] - tri2[:, 0])
    assert np.all(np.einsum("ij,ij->i", n1, tri1.mean(1)) > 0)
    assert np.all(np.einsum("ij,ij->i", n2, tri2.mean(1)) < 0)


def test_marching_cubes_no_crossing():
    m = marching_cubes(lambda x: np.ones(len(x)), (np.zeros(3), np.ones(3)), 0.25)
    assert len(m) == 0


def test_ply_roundtrip_and_components(tmp_path):
    v1, f1 = icosphere_mesh(1.0, subdivisions=1)
    v2, f2 = icosphere_mesh(0.5, (3, 0, 0), subdivisions=1)
    mesh = Mesh(np.concatenate([v1, v2]), np.concatenate([f1, f2 + len(v1)]))
    write_ply(tmp_path / "m.ply", mesh)
    text = (tmp_path / "m.ply").read_text()
    assert "element face 160" in text and "property list uchar int vertex_indices" in text
    back = read_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.faces, mesh.faces)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    comps = connected_components(mesh)
    assert [len(c) for c in comps] == [80, 80]
