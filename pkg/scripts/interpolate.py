"""Appearance interpolation between a dark and a bright training image, written as PNG frames.

    python scripts/interpolate.py --out runs/interp
"""

import argparse
from pathlib import Path

import numpy as np

from wegs.harness import SyntheticSceneSpec, desk_config, interpolation_frames, synth, write_png
from wegs.trainer import train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--frames", type=int, default=11)
    p.add_argument("--gains", type=float, nargs=2, default=(0.7, 1.3))
    p.add_argument("--out", required=True)
    args = p.parse_args()

    transforms = tuple(np.concatenate([np.eye(3) * g, np.zeros((3, 1))], 1) for g in args.gains)
    ds = synth(SyntheticSceneSpec(seed=9, appearance_transforms=transforms))
    state = train(desk_config(total_steps=args.steps), ds.train, ds.points)
    ends = [next(i for i in range(ds.n_train) if ds.appearance_index[i] == a) for a in (0, 1)]
    frames = interpolation_frames(state, state.embeddings[ends[0]], state.embeddings[ends[1]],
                                  ds.test[0].camera, args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        write_png(out / f"frame_{k:03d}.png", frame)
        print(f"frame {k:2d} mean brightness {frame.mean():.4f}")


if __name__ == "__main__":
    main()
