"""Command-line interface: ``streamsdf <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .dataset import read_dataset, write_dataset
from .evaluation import (
    GridField,
    NeuralField,
    SceneField,
    build_eval_points,
    evaluate_field,
    export_slice,
    marching_cubes,
    write_bins,
    write_ply,
    write_reports,
)
from .network import load_checkpoint
from .scenes import NoiseParams, default_intrinsics, generate_trajectory, load_scene, render_sequence, room1
from .supervision import BoundMethod
from .trainer import run
from .voxel import FusionConfig, OccupancyFusion, gt_sdf_grid, load_grid, save_grid

log = logging.getLogger("streamsdf")

BUILTIN_SCENES = {"room1": room1}


def _scene(arg: str):
    if arg in BUILTIN_SCENES:
        return BUILTIN_SCENES[arg]()
    return load_scene(arg)


def _bounds(args, ds=None):
    if getattr(args, "bounds", None):
        v = [float(t) for t in args.bounds.split(",")]
        if len(v) != 6:
            raise SystemExit("--bounds expects xmin,ymin,zmin,xmax,ymax,zmax")
        return np.array(v[:3]), np.array(v[3:])
    if ds is not None and ds.bounds is not None:
        return ds.bounds
    if ds is not None and ds.scene is not None:
        return ds.scene.bounds_min, ds.scene.bounds_max
    raise SystemExit("bounds unknown: pass --bounds or use a dataset with bounds in meta.txt")


def _field(args):
    """Field from --checkpoint, --grid or --scene (exactly one)."""
    given = [a for a in ("checkpoint", "grid", "scene") if getattr(args, a, None)]
    if len(given) != 1:
        raise SystemExit("give exactly one of --checkpoint, --grid, --scene")
    if args.checkpoint:
        return NeuralField(*load_checkpoint(args.checkpoint))
    if args.grid:
        return GridField(load_grid(args.grid))
    return SceneField(_scene(args.scene))


def _gt(args, ds):
    if getattr(args, "gt_grid", None):
        return load_grid(args.gt_grid)
    if ds.scene is None:
        raise SystemExit("dataset has no scene.txt; pass --gt-grid")
    return ds.scene


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_dataset(args) -> int:
    scene = _scene(args.scene)
    rng = np.random.default_rng(args.seed)
    poses = generate_trajectory(args.trajectory, scene, args.frames, rng)
    noise = None if args.no_noise else NoiseParams()
    frames = render_sequence(scene, poses, default_intrinsics(), noise, seed=args.seed, frame_period=1.0 / args.fps)
    write_dataset(args.out, frames, args.format, scene=scene, frame_period=1.0 / args.fps)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def _trainer_config(args):
    values = cfgmod.load_config_file(args.config) if args.config else {}
    for key, attr in (
        ("seed", "seed"), ("bound", "bound"), ("eval_every", "eval_every"), ("pacing", "pacing"),
        ("total_iters", "iters"), ("pixels_per_frame", "pixels_per_frame"),
        ("checkpoint_every", "checkpoint_every"), ("checkpoint_dir", "checkpoint_dir"),
        ("dataset", "dataset"), ("eval_points", "eval_points"),
    ):
        val = getattr(args, attr, None)
        if val is not None:
            values[key] = str(val)
    cfg, extra = cfgmod.build_trainer_config(values)
    if "dataset" not in extra:
        raise SystemExit("no dataset given (--dataset or dataset= in the config file)")
    return cfg, extra


def _train_and_eval(cfg, extra, out: Path, label: str = ""):
    ds = read_dataset(extra["dataset"])
    reports = []
    callbacks = []
    if ds.scene is not None and cfg.eval_every:
        n_eval = extra.get("eval_points", 200_000)
        eval_seed = extra.get("eval_seed", 0)

        def cb(it, params, trainer):
            upto = [f for f in ds.frames if f.frame_id <= trainer.latest[-1].frame_id]
            pts = build_eval_points(upto, ds.scene, n=n_eval, seed=eval_seed)
            rep = evaluate_field(pts, NeuralField(params, trainer.basis), label=label)
            rep.time_index = it
            reports.append(rep)
            log.info("iter %d: sdf %.4f m, collision %.4f, grad %.4f", it, rep.sdf_mean, rep.collision_mean, rep.grad_mean)

        callbacks.append(cb)
    res = run(ds.frames, cfg, callbacks, out_dir=out)
    return res, reports


def cmd_run(args) -> int:
    cfg, extra = _trainer_config(args)
    out = Path(extra.get("checkpoint_dir") or "run_out")
    res, reports = _train_and_eval(cfg, extra, out, label=cfg.loss.bound.kind.value)
    (out / "config.txt").write_text(cfgmod.format_trainer_config(cfg))
    if reports:
        write_reports(out / "metrics.csv", reports)
        write_bins(out / "metrics_bins.csv", reports)
    print(f"{res.trainer.iteration} iterations, {len(res.trainer.keyframes)} keyframes, "
          f"{res.params.n_params()} parameters; outputs in {out}")
    return 0


def cmd_ablate_bounds(args) -> int:
    cfg_base, extra = _trainer_config(args)
    out = Path(extra.get("checkpoint_dir") or "ablate_out")
    rows = []
    for kind in ("ray", "normal", "batch"):
        bound = BoundMethod(kind, cfg_base.loss.bound.max_dist)
        cfg = replace(cfg_base, loss=replace(cfg_base.loss, bound=bound))
        _, reports = _train_and_eval(cfg, extra, out / kind, label=kind)
        rows.extend(reports)
    rows.sort(key=lambda r: (r.time_index, ("ray", "normal", "batch").index(r.label)))
    write_reports(out / "ablation.csv", rows)
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return 0


def cmd_baseline(args) -> int:
    ds = read_dataset(args.dataset)
    bmin, bmax = _bounds(args, ds)
    fusion = OccupancyFusion.for_bounds(bmin, bmax, FusionConfig(voxel_size=args.voxel_size, mode=args.mode))
    for fr in ds.frames:
        fusion.fuse(fr)
    grid = fusion.sdf_grid()
    save_grid(args.out, grid)
    print(f"fused {len(ds.frames)} frames into a {'x'.join(map(str, grid.dims))} grid -> {args.out}")
    return 0


def cmd_make_gt(args) -> int:
    scene = _scene(args.scene)
    grid = gt_sdf_grid(scene, args.resolution)
    save_grid(args.out, grid)
    print(f"wrote {'x'.join(map(str, grid.dims))} ground-truth grid to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = read_dataset(args.dataset)
    field = _field(args)
    pts = build_eval_points(ds.frames, _gt(args, ds), n=args.n_points, seed=args.seed)
    rep = evaluate_field(pts, field, label=args.label)
    write_reports(args.out, [rep])
    if args.bins_out:
        write_bins(args.bins_out, [rep])
    print(f"sdf {rep.sdf_mean:.4f} m  collision {rep.collision_mean:.4f}  grad {rep.grad_mean:.4f}  ({rep.n_points} points)")
    return 0


def cmd_export_mesh(args) -> int:
    field = _field(args)
    ds = read_dataset(args.dataset) if args.dataset else None
    mesh = marching_cubes(field.sdf, _bounds(args, ds), args.resolution)
    write_ply(args.out, mesh)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces -> {args.out}")
    return 0


def cmd_export_slice(args) -> int:
    field = _field(args)
    ds = read_dataset(args.dataset) if args.dataset else None
    vals = export_slice(field.sdf, args.height, _bounds(args, ds), args.resolution, args.out, args.value_range)
    print(f"{vals.shape[1]}x{vals.shape[0]} slice -> {args.out}.csv/.pgm/.txt")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_field_args(p):
    p.add_argument("--checkpoint", help="network checkpoint")
    p.add_argument("--grid", help="voxel SDF grid file")
    p.add_argument("--scene", help="scene file or builtin name (room1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamsdf", description="Continual neural SDF reconstruction from depth streams.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="render a synthetic depth sequence")
    p.add_argument("--scene", default="room1")
    p.add_argument("--trajectory", default="orbit", choices=("orbit", "nav", "approach"))
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--format", default="f32", choices=("f32", "png"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_dataset)

    for name, func, helptext in (
        ("run", cmd_run, "train the network on a dataset"),
        ("ablate-bounds", cmd_ablate_bounds, "train with each bound method and compare"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--dataset")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--bound", choices=("ray", "normal", "batch"))
        p.add_argument("--eval-every", type=int)
        p.add_argument("--eval-points", type=int)
        p.add_argument("--pacing", choices=("dataset", "wall-clock"))
        p.add_argument("--iters", type=int, help="total iterations (continues after the stream ends)")
        p.add_argument("--pixels-per-frame", type=int)
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--checkpoint-dir")
        p.set_defaults(func=func)

    p = sub.add_parser("baseline", help="occupancy fusion + EDT baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--voxel-size", type=float, default=0.07)
    p.add_argument("--mode", default="latest", choices=("latest", "logodds"))
    p.add_argument("--bounds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("make-gt", help="ground-truth SDF grid of a scene")
    p.add_argument("--scene", default="room1")
    p.add_argument("--resolution", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_gt)

    p = sub.add_parser("eval", help="metrics of a trained or reference field against ground truth")
    p.add_argument("--dataset", required=True)
    _add_field_args(p)
    p.add_argument("--gt-grid", help="ground-truth grid (default: the dataset scene)")
    p.add_argument("--n-points", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", default="")
    p.add_argument("--out", required=True, help="MetricReport CSV")
    p.add_argument("--bins-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mesh", help="marching-cubes mesh as ASCII PLY")
    _add_field_args(p)
    p.add_argument("--dataset", help="take bounds from this dataset")
    p.add_argument("--bounds")
    p.add_argument("--resolution", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("export-slice", help="constant-height SDF slice as CSV + PGM")
    _add_field_args(p)
    p.add_argument("--dataset")
    p.add_argument("--bounds")
    p.add_argument("--height", type=float, required=True)
    p.add_argument("--resolution", type=float, default=0.02)
    p.add_argument("--value-range", type=float)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_export_slice)
    return ap


def _glue_negative_values(argv: list[str]) -> list[str]:
    # "--bounds -1,-1,0,1,1,1" would otherwise be read as an unknown flag
    out = list(argv)
    for i in range(len(out) - 1, 0, -1):
        if out[i - 1] == "--bounds" and re.match(r"-\.?\d", out[i]):
            out[i - 1 : i + 1] = [f"--bounds={out[i]}"]
    return out


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(_glue_negative_values(list(sys.argv[1:] if argv is None else argv)))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SystemExit as exc:
        if isinstance(exc.code, int) or exc.code is None:
            return int(exc.code or 0)
        print(f"error: {exc.code}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 2
    except (cfgmod.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
