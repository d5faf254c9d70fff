"""Closed-loop MPC cost of every planner with the true dynamics (first column of the tables).

    python3 scripts/true_model_costs.py vdp cartpole
"""
import sys
import time

from probpmp.experiments import preset, run_single

PLANNERS = ("pmp_mean_h", "icem", "bfgs", "adam")

for name in sys.argv[1:] or ["vdp", "cartpole"]:
    cfg = preset(name)
    system = cfg.task.make_system()
    for p in PLANNERS:
        t = time.perf_counter()
        rec, res = run_single(cfg, p, system, "true", cfg.seed)
        print(f"{name:9s} {p:11s} {rec.cost:9.4f}  {time.perf_counter() - t:6.1f}s  flagged {len(res.flagged_steps)}",
              flush=True)
