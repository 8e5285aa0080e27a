"""Voxel occupancy + EDT baseline at several voxel sizes, against the neural field.

    python scripts/baseline_comparison.py --voxel-sizes 0.05 0.07 0.10 --cache .acceptance_cache
"""

import argparse

from streamsdf import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--voxel-sizes", type=float, nargs="+", default=[0.05, 0.07, 0.10])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache", default=None)
    ap.add_argument("--skip-neural", action="store_true")
    args = ap.parse_args()

    for noise in (True, False):
        scene, frames = ex.orbit_sequence(noise=noise)
        pts = ex.eval_points(frames, scene)
        tag = "noisy" if noise else "noiseless"
        for vs in args.voxel_sizes:
            m = ex.metrics(ex.kinectfusion(frames, scene, vs), pts)
            print(f"{tag:9s} voxel {vs:.2f} m: sdf {m.sdf_mean:.4f} m ({m.sdf_mean / vs:.2f} voxels)  "
                  f"collision {m.collision_mean:.4f}  grad {m.grad_mean:.4f}", flush=True)
        if noise and not args.skip_neural:
            r = ex.train_cached(frames, ex.orbit_config(seed=args.seed), cache_dir=args.cache)
            m = ex.metrics(r, pts)
            print(f"{tag:9s} neural field:  sdf {m.sdf_mean:.4f} m  collision {m.collision_mean:.4f}  grad {m.grad_mean:.4f}")


if __name__ == "__main__":
    main()
