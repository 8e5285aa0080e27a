"""How often each supervision bound under-estimates the true distance, per frame and per primitive.

    python scripts/bound_soundness.py --frames 0 15 30 45
"""

import argparse

from streamsdf import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, nargs="+", default=[0, 15, 30, 45])
    ap.add_argument("--samples", type=int, default=100_000)
    ap.add_argument("--tol", type=float, default=0.01)
    args = ap.parse_args()

    scene, frames = ex.orbit_sequence(noise=False)
    for i in args.frames:
        res = ex.bound_soundness(frames[i], scene, n_samples=args.samples, tol=args.tol)
        for name, c in res.items():
            viol = {k: v for k, v in c.violations_by_primitive.items() if v}
            print(f"frame {i:2d} {name:6s} sound {100 * c.sound_fraction:7.3f}%  ordered {100 * c.order_fraction:7.3f}%  "
                  f"worst excess {c.worst_excess:+.3f} m  violations {viol or '-'}")


if __name__ == "__main__":
    main()
