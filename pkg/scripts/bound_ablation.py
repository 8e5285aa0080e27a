"""Compare the ray, normal-corrected and batch-distance bounds end to end.

    python scripts/bound_ablation.py --seed 0 --cache .acceptance_cache
"""

import argparse

from streamsdf import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=ex.TOTAL_ITERS)
    ap.add_argument("--cache", default=None, help="reuse / store trained runs here")
    args = ap.parse_args()

    scene, frames = ex.orbit_sequence(noise=True)
    pts = ex.eval_points(frames, scene)
    print(f"{'bound':8s} {'sdf [m]':>9s} {'collision':>10s} {'grad cos':>9s} {'minutes':>8s}")
    for kind in ("ray", "normal", "batch"):
        r = ex.train_cached(frames, ex.orbit_config(seed=args.seed, bound=kind, total_iters=args.iters), cache_dir=args.cache)
        m = ex.metrics(r, pts, label=kind)
        print(f"{kind:8s} {m.sdf_mean:9.4f} {m.collision_mean:10.4f} {m.grad_mean:9.4f} {r.seconds / 60:8.1f}", flush=True)


if __name__ == "__main__":
    main()
