"""Experiment drivers shared by ``scripts/`` and the acceptance tests.

Training runs are expensive on a CPU, so ``train_cached`` stores the final
parameters (and any requested snapshots) under a key that hashes the package
source and the input frames together with the configuration. Changing any of
them forces a fresh run.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluation import EvalPointSet, GridField, MetricReport, NeuralField, build_eval_points, evaluate_field
from .geometry import DepthFrame, DepthSamplingConfig, sample_frame, surface_normals
from .network import EmbeddingBasis, NetworkParams
from .scenes import NoiseParams, Scene, default_intrinsics, generate_trajectory, render_sequence, room1
from .supervision import BoundMethod, batch_bound, normal_bound, ray_bound
from .trainer import TrainerConfig, run
from .voxel import FusionConfig, OccupancyFusion

PACKAGE_DIR = Path(__file__).resolve().parent

# desk-scale protocol used throughout the experiments
ORBIT_FRAMES = 60
RAYS_PER_FRAME = 100
TOTAL_ITERS = 1500
EVAL_POINTS = 200_000


def orbit_sequence(noise: bool = True, n_frames: int = ORBIT_FRAMES, seed: int = 0) -> tuple[Scene, list[DepthFrame]]:
    """``room1`` seen from the inward-looking orbit, optionally with sensor noise."""
    scene = room1()
    poses = generate_trajectory("orbit", scene, n_frames)
    frames = render_sequence(scene, poses, default_intrinsics(), NoiseParams() if noise else None, seed=seed)
    return scene, frames


def orbit_config(seed: int = 0, bound: str = "batch", total_iters: int = TOTAL_ITERS, **kw) -> TrainerConfig:
    base = TrainerConfig(pixels_per_frame=RAYS_PER_FRAME, seed=seed, total_iters=total_iters)
    cfg = replace(base, loss=replace(base.loss, bound=BoundMethod(bound)))
    return replace(cfg, **kw) if kw else cfg


# ---------------------------------------------------------------------------
# cached training


@dataclass
class TrainedRun:
    params: NetworkParams
    basis: EmbeddingBasis
    keyframe_ids: list[int]
    snapshots: dict[int, NetworkParams] = field(default_factory=dict)
    seconds: float = 0.0
    cached: bool = False

    def neural_field(self, iteration: int | None = None) -> NeuralField:
        p = self.params if iteration is None else self.snapshots[iteration]
        return NeuralField(p, self.basis)


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _frames_digest(frames: list[DepthFrame]) -> str:
    h = hashlib.sha256()
    for fr in frames:
        h.update(np.ascontiguousarray(fr.depth).tobytes())
        h.update(np.ascontiguousarray(fr.pose.rotation).tobytes())
        h.update(np.ascontiguousarray(fr.pose.translation).tobytes())
        h.update(repr((fr.frame_id, fr.timestamp)).encode())
    return h.hexdigest()


def run_key(frames: list[DepthFrame], cfg: TrainerConfig, snapshot_at=()) -> str:
    payload = json.dumps([_source_digest(), _frames_digest(frames), repr(cfg), sorted(snapshot_at)])
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _save_run(path: Path, run_: TrainedRun) -> None:
    arrays = {"final": run_.params.flatten(), "A": run_.basis.A}
    for it, p in run_.snapshots.items():
        arrays[f"snap_{it}"] = p.flatten()
    meta = {
        "n_octaves": run_.basis.n_octaves,
        "input_scale": run_.basis.input_scale,
        "keyframe_ids": run_.keyframe_ids,
        "seconds": run_.seconds,
        "dtype": str(run_.params.dtype),
    }
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, meta=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def _load_run(path: Path) -> TrainedRun:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        template = NetworkParams.init(0, dtype=np.dtype(meta["dtype"]).type)
        snaps = {int(k[5:]): template.unflatten(z[k]) for k in z.files if k.startswith("snap_")}
        basis = EmbeddingBasis(A=z["A"].copy(), n_octaves=meta["n_octaves"], input_scale=meta["input_scale"])
        return TrainedRun(template.unflatten(z["final"]), basis, meta["keyframe_ids"], snaps, meta["seconds"], True)


def train_cached(
    frames: list[DepthFrame],
    cfg: TrainerConfig,
    snapshot_at: tuple[int, ...] = (),
    cache_dir: str | Path | None = None,
) -> TrainedRun:
    """Train (or load a matching earlier run) and keep parameter copies at ``snapshot_at`` iterations."""
    path = None
    if cache_dir is not None:
        cache = Path(cache_dir)
        cache.mkdir(parents=True, exist_ok=True)
        path = cache / f"run_{run_key(frames, cfg, snapshot_at)}.npz"
        if path.exists():
            return _load_run(path)
    snaps: dict[int, NetworkParams] = {}
    wanted = set(snapshot_at)
    if wanted:
        cfg = replace(cfg, eval_every=math.gcd(*wanted))

    def keep(it, params, trainer):
        if it in wanted:
            snaps[it] = params

    t0 = time.perf_counter()
    res = run(frames, cfg, [keep] if wanted else [])
    out = TrainedRun(
        res.params, res.basis, [k.frame.frame_id for k in res.trainer.keyframes], snaps, time.perf_counter() - t0
    )
    if path is not None:
        _save_run(path, out)
    return out


# ---------------------------------------------------------------------------
# evaluation helpers


def eval_points(frames: list[DepthFrame], scene: Scene, n: int = EVAL_POINTS, seed: int = 0) -> EvalPointSet:
    return build_eval_points(frames, scene, n=n, seed=seed)


def kinectfusion(frames: list[DepthFrame], scene: Scene, voxel_size: float = 0.07) -> GridField:
    fusion = OccupancyFusion.for_bounds(scene.bounds_min, scene.bounds_max, FusionConfig(voxel_size=voxel_size))
    for fr in frames:
        fusion.fuse(fr)
    return GridField(fusion.sdf_grid())


def gradient_norm_median(run_: TrainedRun, points: EvalPointSet, min_sdf: float = 0.2, n: int = 10_000) -> tuple[float, int]:
    """Median |grad f| over the first ``n`` free-space points with s >= ``min_sdf``."""
    sel = np.nonzero(points.sdf >= min_sdf)[0][:n]
    _, g, _ = run_.neural_field().query(points.points[sel])
    return float(np.median(np.linalg.norm(g, axis=1))), len(sel)


def metrics(run_or_field, points: EvalPointSet, label: str = "") -> MetricReport:
    fld = run_or_field.neural_field() if isinstance(run_or_field, TrainedRun) else run_or_field
    return evaluate_field(points, fld, label=label)


# ---------------------------------------------------------------------------
# bound soundness on a rendered frame


@dataclass
class BoundCheck:
    method: str
    n: int
    sound_fraction: float  # |s| <= |b| + tol
    order_fraction: float  # |b| <= |b_ray| (normal: inside its zone only)
    worst_excess: float  # max(|s| - |b|)
    violations_by_primitive: dict[str, int]


def bound_soundness(
    frame: DepthFrame,
    scene: Scene,
    n_samples: int = 100_000,
    tol: float = 0.01,
    seed: int = 0,
    max_dist: float = 0.30,
) -> dict[str, BoundCheck]:
    """Soundness and ordering of the three bounds on one (noiseless) frame."""
    cfg = DepthSamplingConfig()
    per_ray = cfg.n_stratified + cfg.n_gaussian + 1
    batch = sample_frame(frame, -(-n_samples // per_ray), cfg, np.random.default_rng(seed), surface_normals(frame))
    batch = batch.take(np.arange(min(n_samples, len(batch))))
    s = scene.sdf(batch.points)
    rb = ray_bound(batch)
    nb, used = normal_bound(batch, max_dist)
    bb, _ = batch_bound(batch)
    per_prim = np.stack([p.sdf_grad(batch.points)[0] for p in scene.primitives], axis=1)
    active = np.argmin(per_prim, axis=1)
    names = [f"{i}:{type(p).__name__}" for i, p in enumerate(scene.primitives)]
    out = {}
    for name, b, order in (
        ("ray", rb, np.ones(len(rb), bool)),
        ("normal", nb, np.abs(nb) <= np.abs(rb) + 1e-12),
        ("batch", bb, np.abs(bb) <= np.abs(rb) + 1e-12),
    ):
        excess = np.abs(s) - np.abs(b)
        bad = excess > tol
        counts = {names[k]: int(np.sum(bad & (active == k))) for k in range(len(names))}
        zone = used if name == "normal" else np.ones(len(b), bool)
        out[name] = BoundCheck(
            method=name,
            n=len(b),
            sound_fraction=float(1 - bad.mean()),
            order_fraction=float(order[zone].mean()),
            worst_excess=float(excess.max()),
            violations_by_primitive=counts,
        )
    return out
