"""Per-phase wall time of training steps (reported only; CPU numbers are not comparable to a GPU)."""

import argparse

import numpy as np

from streamsdf import experiments as ex
from streamsdf.trainer import PHASES, Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--bound", default="batch", choices=("ray", "normal", "batch"))
    args = ap.parse_args()

    _, frames = ex.orbit_sequence(noise=True, n_frames=ex.ORBIT_FRAMES)
    tr = Trainer(ex.orbit_config(bound=args.bound))
    for fr in frames[:5]:
        tr.push_frame(fr)
    reps = [tr.train_step() for _ in range(args.steps)]
    for ph in PHASES + ("step",):
        ms = np.array([r.timings[ph] for r in reps[1:]]) * 1e3
        print(f"{ph:10s} {ms.mean():8.1f} ms  (median {np.median(ms):.1f})")


if __name__ == "__main__":
    main()
