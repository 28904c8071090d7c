"""Train the full model and the vanilla baseline on the synthetic scene and compare held-out PSNR.

    python scripts/compare_vanilla.py --steps 5000 --out runs/compare
"""

import argparse
import time
from pathlib import Path

from wegs.harness import SyntheticSceneSpec, desk_config, evaluate, noise_retention, synth
from wegs.trainer import save_checkpoint, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--out", help="directory for checkpoints and per-image CSVs")
    args = p.parse_args()

    ds = synth(SyntheticSceneSpec(seed=args.scene_seed))
    results = {}
    for mode in ("wegs", "vanilla"):
        t0 = time.perf_counter()
        state = train(desk_config(mode=mode, total_steps=args.steps, seed=args.seed), ds.train, ds.points)
        rep = evaluate(state, ds)
        kept = noise_retention(state, ds.noise_start, len(ds.points))
        results[mode] = rep
        print(f"{mode:8s} {rep.summary()} n={len(state.cloud)} noise_kept={kept:.2f} "
              f"time={time.perf_counter() - t0:.0f}s")
        if args.out:
            out = Path(args.out)
            save_checkpoint(state, out / mode)
            (out / f"{mode}_eval.csv").write_text(rep.to_csv())
    print(f"gap {results['wegs'].mean_psnr - results['vanilla'].mean_psnr:+.2f} dB")


if __name__ == "__main__":
    main()
