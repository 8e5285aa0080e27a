"""Continual training loop: keyframe replay, active frame selection and step accounting."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .geometry import DepthFrame, DepthSamplingConfig, SampleBatch, sample_frame, surface_normals
from .network import (
    DEFAULT_INPUT_SCALE,
    AdamState,
    EmbeddingBasis,
    NetworkParams,
    NonFiniteError,
    adam_step,
    backward,
    build_embedding_basis,
    forward,
    save_checkpoint,
)
from .supervision import LossConfig, compute_supervision, sdf_loss

log = logging.getLogger(__name__)

PHASES = ("sampling", "bounds", "forward", "backward", "optimizer")
RUN_LOG_COLUMNS = ("iteration", "loss_total", "loss_sdf", "loss_grad", "loss_eik", "n_keyframes", "frame_id")
TIMING_COLUMNS = ("iteration", "wall_ms", "step_ms") + tuple(f"{p}_ms" for p in PHASES)


@dataclass
class TrainerConfig:
    n_latest: int = 2
    n_keyframes: int = 3
    pixels_per_frame: int = 200
    iters_per_new_frame: int = 10
    kf_threshold: float = 0.85  # add a keyframe when the well-explained probe fraction is below this
    probe_loss: float = 0.05  # per-sample sdf loss counted as "well explained"
    probe_rays: int = 200
    kf_decay: float = 0.9
    seed: int = 0
    pacing: str = "dataset"  # or "wall-clock"
    total_iters: int | None = None  # keep training on the final state until this count
    eval_every: int = 0  # iterations; 0 disables callbacks
    checkpoint_every: int = 0
    lr: float = 0.0013
    weight_decay: float = 0.012
    # linear ramp of the step size over the first iterations; 0 disables it
    lr_warmup: int = 100
    n_octaves: int = 5
    input_scale: float = DEFAULT_INPUT_SCALE
    normal_max_jump: float = 0.10
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: DepthSamplingConfig = field(default_factory=DepthSamplingConfig)

    def __post_init__(self):
        for name in ("n_latest", "pixels_per_frame", "iters_per_new_frame", "probe_rays"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_warmup < 0:
            raise ValueError("lr_warmup must be >= 0")
        if self.n_keyframes < 0:
            raise ValueError("n_keyframes must be >= 0")
        if not 0 < self.kf_threshold < 1:
            raise ValueError("kf_threshold must lie in (0, 1)")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")
        if self.pacing not in ("dataset", "wall-clock"):
            raise ValueError("pacing must be 'dataset' or 'wall-clock'")

    @property
    def frames_per_iter(self) -> int:
        return self.n_latest + self.n_keyframes


@dataclass
class Keyframe:
    frame: DepthFrame
    running_loss: float = 0.0
    added_at_iteration: int = 0

    def update(self, batch_loss: float, decay: float = 0.9) -> None:
        if not np.isfinite(batch_loss) or batch_loss < 0:
            raise ValueError(f"invalid keyframe loss {batch_loss}")
        self.running_loss = decay * self.running_loss + batch_loss


def _draw_weighted(weights: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """k indices without replacement, each draw proportional to the remaining weights.

    Once the remaining weight is zero, draws fall back to uniform over what is left.
    """
    w = np.asarray(weights, dtype=np.float64).copy()
    avail = np.ones(len(w), dtype=bool)
    out = []
    for _ in range(min(k, len(w))):
        ww = np.where(avail, w, 0.0)
        tot = ww.sum()
        p = ww / tot if tot > 0 else avail / avail.sum()
        j = int(rng.choice(len(w), p=p))
        out.append(j)
        avail[j] = False
    return out


def select_frames(
    latest: list[DepthFrame],
    keyframes: list[Keyframe],
    rng: np.random.Generator,
    n_latest: int = 2,
    n_keyframes: int = 3,
) -> tuple[list[DepthFrame], list[int]]:
    """The ``n_latest`` newest frames plus ``n_keyframes`` loss-weighted keyframe draws.

    Missing slots (short history, too few keyframes) are filled with the
    newest frame. Returns (frames, keyframe indices drawn).
    """
    if not latest:
        raise ValueError("no frame received yet")
    newest = latest[-1]
    recent = list(latest[-n_latest:])
    recent = [newest] * (n_latest - len(recent)) + recent
    picks = _draw_weighted(np.array([kf.running_loss for kf in keyframes]), n_keyframes, rng)
    chosen = [keyframes[j].frame for j in picks]
    chosen += [newest] * (n_keyframes - len(chosen))
    return recent + chosen, picks


@dataclass
class StepReport:
    iteration: int
    loss_total: float
    loss_sdf: float
    loss_grad: float
    loss_eik: float
    n_keyframes: int
    frame_id: int
    timings: dict  # phase -> seconds, plus "step"
    wall: float  # seconds since run start

    def log_row(self) -> list:
        return [self.iteration, f"{self.loss_total:.9g}", f"{self.loss_sdf:.9g}", f"{self.loss_grad:.9g}",
                f"{self.loss_eik:.9g}", self.n_keyframes, self.frame_id]

    def timing_row(self) -> list:
        return [self.iteration, f"{1000 * self.wall:.3f}", f"{1000 * self.timings['step']:.3f}"] + [
            f"{1000 * self.timings.get(p, 0.0):.3f}" for p in PHASES
        ]


EvalCallback = Callable[[int, NetworkParams, "Trainer"], None]


class Trainer:
    """Owns the network, optimiser, keyframe set and the sampling RNG."""

    def __init__(self, config: TrainerConfig, params: NetworkParams | None = None, basis: EmbeddingBasis | None = None):
        self.config = config
        self.basis = basis or build_embedding_basis(config.n_octaves, config.input_scale)
        self.params = params if params is not None else NetworkParams.init(config.seed)
        self.opt = AdamState.for_params(self.params, lr=config.lr, weight_decay=config.weight_decay)
        self.rng = np.random.default_rng([config.seed, 0])
        self.keyframes: list[Keyframe] = []
        self.latest: list[DepthFrame] = []
        self.frozen: NetworkParams | None = None
        self.iteration = 0
        self.frames_seen = 0
        self._normals: dict[int, np.ndarray] = {}
        self.dump_dir: Path | None = None

    # -- frames -------------------------------------------------------------

    def normals_for(self, frame: DepthFrame) -> np.ndarray:
        key = frame.frame_id
        if key not in self._normals:
            self._normals[key] = surface_normals(frame, self.config.normal_max_jump)
        return self._normals[key]

    def probe(self, frame: DepthFrame, params: NetworkParams) -> tuple[float, float]:
        """(fraction of probe samples with sdf loss below ``probe_loss``, mean probe sdf loss) under ``params``."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 1, frame.frame_id])
        batch = sample_frame(frame, cfg.probe_rays, cfg.sampling, rng, self.normals_for(frame))
        batch = compute_supervision(batch, cfg.loss.bound)
        f = forward(params, self.basis, batch.points).astype(np.float64)
        per = sdf_loss(f, batch.bounds, batch.depth_gap, cfg.loss)
        return float(np.mean(per < cfg.probe_loss)), float(per.mean())

    def maybe_add_keyframe(self, frame: DepthFrame) -> bool:
        """Add ``frame`` when the frozen network explains too little of it. The first frame is always added."""
        frac, mean_loss = self.probe(frame, self.frozen if self.keyframes else self.params)
        if self.keyframes and frac >= self.config.kf_threshold:
            return False
        # seed the accumulator so a new keyframe can be drawn before its first replay
        self.keyframes.append(Keyframe(frame, mean_loss, self.iteration))
        self.frozen = self.params.copy()
        log.debug("keyframe %d added at iteration %d", frame.frame_id, self.iteration)
        return True

    def push_frame(self, frame: DepthFrame) -> bool:
        self.latest = (self.latest + [frame])[-self.config.n_latest :]
        self.frames_seen += 1
        return self.maybe_add_keyframe(frame)

    # -- optimisation --------------------------------------------------------

    def assemble_batch(self, frames: list[DepthFrame]) -> SampleBatch:
        cfg = self.config
        parts = [
            sample_frame(fr, cfg.pixels_per_frame, cfg.sampling, self.rng, self.normals_for(fr), slot=i)
            for i, fr in enumerate(frames)
        ]
        return SampleBatch.concat(parts)

    def lr_at(self, iteration: int) -> float:
        """Step size for the update that follows ``iteration`` completed steps.

        Every softplus unit is positive, so the first Adam updates (sign steps
        of size lr on all parameters) move the output coherently by up to a
        metre. Without the ramp, a seed whose first step goes negative hits the
        exponential free-space term hard and can settle on a flat field.
        """
        w = self.config.lr_warmup
        return self.config.lr if w == 0 else self.config.lr * min(1.0, (iteration + 1) / w)

    def train_step(self) -> StepReport:
        cfg = self.config
        t = {}
        t0 = time.perf_counter()
        frames, picks = select_frames(self.latest, self.keyframes, self.rng, cfg.n_latest, cfg.n_keyframes)
        batch = self.assemble_batch(frames)
        t1 = time.perf_counter()
        batch = compute_supervision(batch, cfg.loss.bound)
        t2 = time.perf_counter()
        t["sampling"], t["bounds"] = t1 - t0, t2 - t1
        try:
            loss, grads = backward(self.params, self.basis, batch, cfg.loss, timings=t)
        except (NonFiniteError, FloatingPointError) as exc:
            self._dump(batch, exc)
            raise
        t3 = time.perf_counter()
        self.opt.lr = self.lr_at(self.iteration)
        adam_step(self.params, grads, self.opt)
        t["optimizer"] = time.perf_counter() - t3
        self.iteration += 1
        # slots n_latest.. came from the drawn keyframes, in draw order
        for slot, j in enumerate(picks, start=cfg.n_latest):
            m = batch.slots == slot
            if m.any():
                self.keyframes[j].update(float(loss.per_sample[m].mean()), cfg.kf_decay)
        t["step"] = time.perf_counter() - t0
        return StepReport(self.iteration, loss.total, loss.sdf, loss.grad, loss.eik, len(self.keyframes),
                          self.latest[-1].frame_id, t, 0.0)

    def _dump(self, batch: SampleBatch, exc: Exception) -> None:
        log.error("iteration %d: %s", self.iteration + 1, exc)
        if self.dump_dir is None:
            return
        path = self.dump_dir / f"nonfinite_{self.iteration + 1:06d}.npz"
        np.savez(path, points=batch.points, bounds=batch.bounds, approx_grad=batch.approx_grad,
                 depth=batch.depth, measured=batch.measured, frame_ids=batch.frame_ids)
        log.error("offending batch written to %s", path)


# ---------------------------------------------------------------------------
# streaming


def paced(frames: Iterable[DepthFrame], pacing: str, clock: Callable[[], float], start: float) -> Iterator[DepthFrame]:
    """Frames in timestamp order.

    ``dataset``: every frame, as fast as training allows. ``wall-clock``: each
    pull returns the newest frame whose timestamp has elapsed since ``start``,
    dropping anything older; if nothing new has arrived it waits for the next one.
    """
    frames = list(frames)
    if pacing == "dataset":
        yield from frames
        return
    if not frames:
        return
    t_first = frames[0].timestamp
    i = 0
    while i < len(frames):
        now = clock() - start
        j = i
        while j + 1 < len(frames) and frames[j + 1].timestamp - t_first <= now:
            j += 1
        wait = frames[j].timestamp - t_first - now
        if wait > 0:
            time.sleep(wait)
        yield frames[j]
        i = j + 1


@dataclass
class RunResult:
    params: NetworkParams
    basis: EmbeddingBasis
    trainer: Trainer
    reports: list[StepReport]
    frames_used: list[int]


def run(
    stream: Iterable[DepthFrame],
    config: TrainerConfig,
    callbacks: list[EvalCallback] | tuple = (),
    out_dir: str | Path | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> RunResult:
    """Train on a frame stream, ``iters_per_new_frame`` steps per accepted frame.

    Writes ``run_log.csv`` (deterministic loss columns), ``timings.csv`` and
    checkpoints to ``out_dir`` when given. Callbacks receive a parameter copy.
    """
    trainer = Trainer(config)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = tim_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trainer.dump_dir = out
        log_fh = open(out / "run_log.csv", "w", newline="")
        tim_fh = open(out / "timings.csv", "w", newline="")
        log_w, tim_w = csv.writer(log_fh), csv.writer(tim_fh)
        log_w.writerow(RUN_LOG_COLUMNS)
        tim_w.writerow(TIMING_COLUMNS)
    reports: list[StepReport] = []
    used: list[int] = []
    start = clock()

    def step():
        rep = trainer.train_step()
        rep.wall = clock() - start
        reports.append(rep)
        if out is not None:
            log_w.writerow(rep.log_row())
            tim_w.writerow(rep.timing_row())
            if config.checkpoint_every and rep.iteration % config.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{rep.iteration:06d}.bin", trainer.params, trainer.basis)
        if config.eval_every and rep.iteration % config.eval_every == 0:
            snapshot = trainer.params.copy()
            for cb in callbacks:
                cb(rep.iteration, snapshot, trainer)

    try:
        for frame in paced(stream, config.pacing, clock, start):
            trainer.push_frame(frame)
            used.append(frame.frame_id)
            for _ in range(config.iters_per_new_frame):
                step()
        if not used:
            raise ValueError("stream yielded no frames")
        while config.total_iters is not None and trainer.iteration < config.total_iters:
            step()
    finally:
        if log_fh is not None:
            log_fh.close()
            tim_fh.close()
    if out is not None:
        save_checkpoint(out / "final.bin", trainer.params, trainer.basis)
    return RunResult(trainer.params, trainer.basis, trainer, reports, used)
