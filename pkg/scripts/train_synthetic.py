"""Train DSC and its iso-active baselines on the synthetic task and print final MSEs.

    python scripts/train_synthetic.py [--steps 2000] [--seeds 42,1337,7] [--out runs/]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from dsc.trainer import TrainConfig, make_synthetic_task, run_training


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", default="42,1337,7")
    ap.add_argument("--out", type=Path, default=None, help="write <arch>.csv metrics here")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    base = TrainConfig()
    task = make_synthetic_task(base.d, base.C, base.task_seed, base.noise_std)
    with threadpool_limits(limits=1):
        for arch in ("dsc", "dense", "moe", "molora"):
            res = run_training(replace(base, arch=arch), task, args.steps, seeds)
            if args.out:
                args.out.mkdir(parents=True, exist_ok=True)
                (args.out / f"{arch}.csv").write_text(res.csv)
            mses = "  ".join(f"{s}:{res.final_mse[s]:.5f}" for s in seeds)
            print(f"{arch:<7} eval mse  {mses}")


if __name__ == "__main__":
    main()
