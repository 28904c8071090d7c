"""Loss-term ablations on the synthetic scene, averaged over training seeds.

    python scripts/ablations.py --seeds 0 1 2 --steps 5000
"""

import argparse

import numpy as np

from wegs.harness import SyntheticSceneSpec, desk_config, evaluate, noise_retention, synth
from wegs.losses import LossWeights
from wegs.trainer import train

_default = LossWeights()
VARIANTS = {
    "full": {},
    "no_regSH": {"w_regSH": 0.0},
    "no_regTS": {"w_regTS": 0.0},
    "no_regM": {"w_regM": 0.0},
    "default_weights": {"w_regM": _default.w_regM, "w_regSH": _default.w_regSH, "w_regTS": _default.w_regTS,
                        "mask_reg_reduction": "mean"},
    "vanilla": {"mode": "vanilla"},
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    args = p.parse_args()

    ds = synth(SyntheticSceneSpec(seed=0))
    print("variant          psnr   spread  separation  noise_kept")
    for name in args.variants:
        rows = []
        for seed in args.seeds:
            state = train(desk_config(total_steps=args.steps, seed=seed, **VARIANTS[name]), ds.train, ds.points)
            rep = evaluate(state, ds)
            rows.append((rep.mean_psnr, rep.separation, noise_retention(state, ds.noise_start, len(ds.points))))
        r = np.array(rows)
        print(f"{name:15s} {r[:, 0].mean():6.2f}  {np.ptp(r[:, 0]):6.2f}  {r[:, 1].mean():10.3f}  {r[:, 2].mean():10.2f}",
              flush=True)


if __name__ == "__main__":
    main()
