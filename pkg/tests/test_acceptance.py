"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line (repeated in the terminal summary). The
training-based criteria share runs through ``streamsdf.experiments.train_cached``;
the cache key hashes the package source and input frames along with the configuration, so
any code change retrains. Set STREAMSDF_ACCEPTANCE_CACHE to relocate the
cache or delete the directory to force fresh runs. The full suite trains six
networks and takes a few hours on one CPU core.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from oracles import brute_lower_envelope, brute_sq_edt, central_diff, sphere_sdf
from streamsdf import experiments as ex
from streamsdf.cli import main as cli_main
from streamsdf.evaluation import connected_components, is_watertight, marching_cubes, submesh, visible_mask
from streamsdf.geometry import DepthSamplingConfig, sample_frame, surface_normals
from streamsdf.network import (
    NetworkParams,
    backward,
    build_embedding_basis,
    forward,
    input_gradient,
    save_checkpoint,
)
from streamsdf.supervision import BoundMethod, LossConfig, compute_supervision
from streamsdf.voxel import edt_1d, edt_3d

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("STREAMSDF_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
SEEDS = (0, 1, 2)


def check(item: str, ok: bool, detail: str) -> None:
    record(item, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="module")
def noisy():
    return ex.orbit_sequence(noise=True)


@pytest.fixture(scope="module")
def points(noisy):
    scene, frames = noisy
    return ex.eval_points(frames, scene)


@pytest.fixture(scope="module")
def batch_runs(noisy):
    _, frames = noisy
    return {s: ex.train_cached(frames, ex.orbit_config(seed=s, bound="batch"), cache_dir=CACHE) for s in SEEDS}


@pytest.fixture(scope="module")
def batch_reports(batch_runs, points):
    return {s: ex.metrics(r, points, label=f"batch seed {s}") for s, r in batch_runs.items()}


@pytest.fixture(scope="module")
def ablation_reports(noisy, points, batch_reports):
    _, frames = noisy
    out = {"batch": batch_reports[0]}
    for kind in ("ray", "normal"):
        r = ex.train_cached(frames, ex.orbit_config(seed=0, bound=kind), cache_dir=CACHE)
        out[kind] = ex.metrics(r, points, label=kind)
    return out


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _all_terms_batch():
    """A rendered batch and a float64 network whose loss hits every branch."""
    scene, frames = ex.orbit_sequence(noise=False, n_frames=4)
    fr = frames[0]
    raw = sample_frame(fr, 40, DepthSamplingConfig(), np.random.default_rng(7), surface_normals(fr))
    batch = compute_supervision(raw, BoundMethod("batch"))
    basis = build_embedding_basis()
    p = NetworkParams.init(11, dtype=np.float64)
    # widen and shift the output so some free-space predictions fall below 0
    # while others exceed their bound
    p.weights[4] *= 40.0
    f = forward(p, basis, batch.points)
    free = np.abs(batch.depth_gap) > LossConfig().trunc
    p.biases[4] -= np.quantile(f[free], 0.25)
    return batch, basis, p


def test_item01_gradient_correctness():
    t0 = time.perf_counter()
    basis = build_embedding_basis()
    rng = np.random.default_rng(101)
    worst_in = 0.0
    for _ in range(100):
        p = NetworkParams.init(int(rng.integers(2**31)), dtype=np.float64)
        x = rng.uniform([-3, -2, 0], [3, 2, 2.5], size=(1, 3))
        g = input_gradient(p, basis, x)
        fd = central_diff(lambda y: forward(p, basis, y), x, h=1e-4)
        worst_in = max(worst_in, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))

    batch, basis, p = _all_terms_batch()
    cfg = LossConfig()
    loss, grads = backward(p, basis, batch, cfg)
    f = forward(p, basis, batch.points)
    near = np.abs(batch.depth_gap) <= cfg.trunc
    branches = {
        "near": int(near.sum()),
        "exp": int((~near & (f < 0)).sum()),
        "linear": int((~near & (f > batch.bounds)).sum()),
        "grad": loss.n_grad,
        "eik": loss.n_eik,
    }
    flat, gflat = p.flatten(), grads.flatten()
    worst_p = 0.0
    for i in rng.choice(len(flat), 50, replace=False):
        vals = []
        for sgn in (1, -1):
            q = flat.copy()
            q[i] += sgn * 1e-4
            vals.append(backward(p.unflatten(q), basis, batch, cfg)[0].total)
        fd = (vals[0] - vals[1]) / 2e-4
        worst_p = max(worst_p, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-300))
    dt = time.perf_counter() - t0
    ok = worst_in <= 1e-5 and worst_p <= 1e-3 and min(branches.values()) > 0 and dt <= 60
    check(
        "1",
        ok,
        f"input-grad rel err {worst_in:.2e} (<=1e-5), param-grad rel err {worst_p:.2e} (<=1e-3), "
        f"active samples {branches}, {dt:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. EDT oracle equivalence


def test_item02_edt_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    bad = 0
    for k in range(200):
        n = int(rng.integers(1, 257))
        f = np.where(rng.random(n) < rng.uniform(0.01, 0.5), rng.integers(0, 50, n).astype(float), np.inf)
        if not np.array_equal(edt_1d(f), brute_lower_envelope(f)):
            bad += 1
    for k in range(200):
        shape = (32, 32, 32) if k == 0 else tuple(int(s) for s in rng.integers(1, 33, 3))
        seeds = rng.random(shape) < rng.uniform(0.001, 0.3)
        if not np.array_equal(edt_3d(seeds), np.sqrt(brute_sq_edt(seeds))):
            bad += 1
    dt = time.perf_counter() - t0
    check("2", bad == 0 and dt <= 60, f"{bad} mismatches over 200 1-D + 200 3-D instances (largest 32^3), {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3. bound soundness and ordering


@pytest.fixture(scope="module")
def bound_checks():
    t0 = time.perf_counter()
    scene, frames = ex.orbit_sequence(noise=False, n_frames=ex.ORBIT_FRAMES)
    res = ex.bound_soundness(frames[0], scene, n_samples=100_000, tol=0.01)
    return res, time.perf_counter() - t0


@pytest.mark.parametrize("method", ["ray", "normal", "batch"])
def test_item03_bound_soundness(bound_checks, method):
    res, dt = bound_checks
    c = res[method]
    ok = c.sound_fraction >= 0.999 and dt <= 60
    worst = {k: v for k, v in c.violations_by_primitive.items() if v}
    check(
        f"3.{method}",
        ok,
        f"|s| <= |b| + 0.01 for {100 * c.sound_fraction:.3f}% of {c.n} samples (>=99.9%), "
        f"worst excess {c.worst_excess:.3f} m, violations by primitive {worst or 'none'}",
    )


def test_item03_bound_ordering(bound_checks):
    res, _ = bound_checks
    b, n = res["batch"].order_fraction, res["normal"].order_fraction
    check("3.order", b == 1.0 and n == 1.0, f"|b_batch|<=|b_ray| {100 * b:.3f}%, |b_normal|<=|b_ray| in zone {100 * n:.3f}%")


# ---------------------------------------------------------------------------
# 4 to 8: trained desk-scale reconstruction


def test_item04_desk_scale_reconstruction(batch_reports, batch_runs):
    errs = {s: r.sdf_mean for s, r in batch_reports.items()}
    mean = float(np.mean(list(errs.values())))
    ok = mean <= 0.06 and max(errs.values()) <= 0.06 + 0.02
    secs = ", ".join(f"{batch_runs[s].seconds / 60:.0f}" for s in SEEDS)
    check(
        "4",
        ok,
        f"mean SDF error over seeds {mean:.4f} m (<=0.06), per seed "
        + ", ".join(f"{s}: {e:.4f}" for s, e in errs.items())
        + f" (each <=0.08); training minutes {secs}",
    )


def test_item05_bound_method_ordering(ablation_reports):
    e = {k: r.sdf_mean for k, r in ablation_reports.items()}
    ok = e["batch"] <= e["normal"] + 0.005 and e["normal"] <= e["ray"] + 0.005
    check("5", ok, f"SDF error batch {e['batch']:.4f} <= normal {e['normal']:.4f} <= ray {e['ray']:.4f} (ties within 0.005)")


def test_item06_baseline_direction(noisy, points, batch_reports):
    scene, frames = noisy
    kf = ex.metrics(ex.kinectfusion(frames, scene, 0.07), points, label="kf+ 7cm")
    neural = batch_reports[0].sdf_mean
    check("6.direction", neural <= kf.sdf_mean, f"neural {neural:.4f} m <= voxel baseline (7 cm) {kf.sdf_mean:.4f} m")


def test_item06_baseline_noiseless():
    scene, frames = ex.orbit_sequence(noise=False)
    pts = ex.eval_points(frames, scene)
    kf = ex.metrics(ex.kinectfusion(frames, scene, 0.07), pts, label="kf+ noiseless")
    check("6.noiseless", kf.sdf_mean <= 1.5 * 0.07, f"voxel baseline noiseless mean error {kf.sdf_mean:.4f} m (<=0.105)")


def test_item07_eikonal(batch_runs, points):
    med, n = ex.gradient_norm_median(batch_runs[0], points, min_sdf=0.2, n=10_000)
    check("7", n == 10_000 and 0.85 <= med <= 1.15, f"median |grad f| {med:.3f} over {n} free-space points with s >= 0.2 m ([0.85, 1.15])")


def test_item08_collision_and_gradient(batch_reports):
    r = batch_reports[0]
    ok = r.collision_mean <= 0.05 and r.grad_mean <= 0.2
    check("8", ok, f"collision-cost error {r.collision_mean:.4f} (<=0.05), gradient cosine distance {r.grad_mean:.4f} (<=0.2)")


# ---------------------------------------------------------------------------
# 9. compactness


def test_item09_model_compactness(tmp_path):
    p = NetworkParams.init(0)
    path = tmp_path / "model.bin"
    save_checkpoint(path, p, build_embedding_basis())
    size = path.stat().st_size
    n = p.n_params()
    print(f"parameter count: {n}")
    ok = size <= 1.5e6 and abs(n - 3.3e5) / 3.3e5 <= 0.02
    check("9", ok, f"checkpoint {size / 1e6:.3f} MB (<=1.5), {n} parameters (3.3e5 within 2%)")


# ---------------------------------------------------------------------------
# 10. marching cubes


def test_item10_sphere_mesh_fidelity():
    t0 = time.perf_counter()
    c, r, res = np.array([0.1, -0.2, 0.3]), 0.7, 0.05
    mesh = marching_cubes(lambda x: sphere_sdf(x, c, r), (c - 1.0, c + 1.0), res)
    dev = float(np.max(np.abs(np.linalg.norm(mesh.vertices - c, axis=1) - r)))
    ok = dev <= res and is_watertight(mesh) and time.perf_counter() - t0 <= 60
    check("10.sphere", ok, f"max vertex deviation {dev:.4f} m (<= resolution {res}), watertight {is_watertight(mesh)}")


def test_item10_trained_field_mesh(batch_runs, noisy):
    scene, _ = noisy
    t0 = time.perf_counter()
    fld = batch_runs[0].neural_field()
    margin = 0.1
    mesh = marching_cubes(fld.sdf, (scene.bounds_min - margin, scene.bounds_max + margin), 0.05, close_boundary=True)
    comps = connected_components(mesh)
    # the room interior is the component whose bounding box spans the most volume
    def extent(idx):
        v = mesh.vertices[np.unique(mesh.faces[idx])]
        return float(np.prod(v.max(0) - v.min(0)))

    interior = max(comps, key=extent) if comps else np.zeros(0, int)
    part = submesh(mesh, interior)
    ok = len(mesh) > 0 and is_watertight(part) and time.perf_counter() - t0 <= 60
    check(
        "10.trained",
        ok,
        f"{len(mesh.faces)} faces in {len(comps)} components; interior component {len(part.faces)} faces, "
        f"watertight {is_watertight(part)}",
    )


# ---------------------------------------------------------------------------
# 11. determinism through the CLI


def test_item11_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["make-dataset", "--frames", "6", "--out", str(data)]) == 0
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        argv = ["run", "--dataset", str(data), "--seed", "1", "--pixels-per-frame", "40",
                "--checkpoint-every", "20", "--checkpoint-dir", str(out)]
        assert cli_main(argv) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir() if p.name == "run_log.csv" or p.suffix == ".bin")
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    same &= names == sorted(p.name for p in outs[1].iterdir() if p.name == "run_log.csv" or p.suffix == ".bin")
    check("11", same and len(names) >= 3, f"{len(names)} files byte-identical across two runs: {', '.join(names)}")


# ---------------------------------------------------------------------------
# trainer invariants checked at acceptance scale


def test_keyframe_count_sanity(batch_runs):
    counts = [len(r.keyframe_ids) for r in batch_runs.values()]
    check("kf-count", all(5 <= c <= 60 for c in counts), f"keyframes per run {counts} (sanity range [5, 60])")


def test_replay_prevents_forgetting(noisy):
    """Camera sees frames 0-14, then moves to the far side (25-44) and never returns."""
    scene, frames = noisy
    seen, later = frames[:15], frames[25:45]
    t0, t1 = 150, 650
    run_ = ex.train_cached(seen + later, ex.orbit_config(seed=0, total_iters=t1), snapshot_at=(t0, t1), cache_dir=CACHE)
    pts = ex.eval_points(frames[:10], scene, n=50_000, seed=3)
    region = pts.subset(~visible_mask(pts.points, later))
    e0 = ex.metrics(run_.neural_field(t0), region).sdf_mean
    e1 = ex.metrics(run_.neural_field(t1), region).sdf_mean
    ok = len(region) >= 1000 and e1 <= 1.5 * e0
    check("replay", ok, f"left-region error {e0:.4f} m at it {t0} -> {e1:.4f} m at it {t1} (<= +50%), {len(region)} points")
