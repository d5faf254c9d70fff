"""Offline model-based RL table for one system.

    python3 scripts/run_offline.py configs/vdp_offline.yaml [--reps 0 1 2] [--out runs/vdp]

Writes one JSON record per (model kind, planner, seed), plus table.csv.
"""
import argparse
import logging
from dataclasses import replace

from probpmp.experiments import aggregate, format_table, load_config, run_offline_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--reps", type=int, nargs="*", help="repetition indices (default: all)")
    ap.add_argument("--planners", nargs="*")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    if args.planners:
        cfg = replace(cfg, planners=tuple(args.planners))
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    recs = run_offline_experiment(cfg, repetitions=args.reps)
    print(format_table(aggregate(recs)))
    print("records in", cfg.out_dir())


if __name__ == "__main__":
    main()
