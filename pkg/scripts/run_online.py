"""Online loop on Duffing: random sweep, then retrain + MPC for each trial.

    python3 scripts/run_online.py configs/duffing_online.yaml --planners pmp_mean_h icem
"""
import argparse
import logging
from dataclasses import replace

import numpy as np

from probpmp.experiments import known_dynamics_reference, load_config, run_online_rl


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--planners", nargs="*", default=["pmp_mean_h", "icem"])
    ap.add_argument("--reps", type=int, nargs="*")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    ref = known_dynamics_reference(cfg)
    print(f"known dynamics (pmp_mean_h): {ref:.3f}")
    for p in args.planners:
        c = run_online_rl(cfg, p, repetitions=args.reps)
        m, s = np.nanmean(c, axis=0), np.nanstd(c, axis=0)
        print(p)
        for n, (a, b) in enumerate(zip(m, s)):
            print(f"  trial {n:2d}  {a:8.3f} +- {b:.3f}")


if __name__ == "__main__":
    main()
