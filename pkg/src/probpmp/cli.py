"""Command line entry point: simulate, train, plan, mpc, experiment, compare.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .direct import MeanCostObjective, adam_plan, bfgs_plan, icem_plan
from .experiments import (TABLE_SETTINGS, ExperimentConfig, ResultRecord, aggregate, format_table, load_config,
                          load_records, output_root, run_offline_experiment, run_online_rl, run_single, write_table)
from .integrate import (ORACLE, ControlSignal, DivergenceError, IntegratorConfig, NonConvergenceError, Trajectory,
                        integrate_adaptive, read_table, schroeder_sweep, write_table as write_csv)
from .mpc import PLANNERS, _knot_times
from .neural import NetConfig, load_ensemble, save_ensemble
from .ocp import ensemble_trajectory_costs
from .pmp import ShootingProblem, SolverConfig, solve_mean_h, solve_mean_u
from .systems import as_ensemble
from .training import (ExcitationConfig, FitHistory, TrainConfig, fit_ensemble, generate_offline_dataset,
                       load_datasets, save_datasets)

log = logging.getLogger("probpmp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
REPLAY = ORACLE  # integrator used for reported and replayed costs


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _task(args):
    if args.system not in TABLE_SETTINGS:
        raise UsageError(f"unknown system {args.system!r}; choose from {sorted(TABLE_SETTINGS)}")
    return TABLE_SETTINGS[args.system]


def _model(spec: str, task):
    if spec == "true":
        return task.make_system()
    p = Path(spec)
    if not p.with_suffix(".json").exists():
        raise UsageError(f"model file {p.with_suffix('.json')} not found")
    return load_ensemble(p)


def _out(args, name) -> Path:
    return Path(args.out) if args.out else output_root() / name


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    task = _task(args)
    system = task.make_system()
    out = _out(args, f"simulate_{args.system}")
    if args.trials:
        box = [(-3.0, 3.0)] * system.d_x
        ds = generate_offline_dataset(system, args.trials, args.tf or task.tf, task.dt,
                                      ExcitationConfig(args.amplitude or task.bounds[1]), box, task.sigma, args.seed)
        save_datasets(out, ds, {"system": args.system, "seed": args.seed, "sigma": task.sigma,
                                "n_trials": args.trials, "obs_interval": task.dt})
        print(f"wrote {len(ds)} trials to {out}")
        return EXIT_OK
    tf = args.tf or task.tf
    x0 = np.array(args.x0 if args.x0 else task.x0, dtype=float)
    if x0.size != system.d_x:
        raise UsageError(f"x0 needs {system.d_x} values")
    if args.amplitude:
        u = schroeder_sweep(args.amplitude, 8, tf - task.t0, seed=args.seed, d_u=system.d_u)
    else:
        u = ControlSignal([task.t0, tf], np.zeros((2, system.d_u)))
    times = np.linspace(task.t0, tf, int(round((tf - task.t0) / task.dt)) + 1)
    tr = integrate_adaptive(lambda t, x: system.f(x, u(t), t), x0, (task.t0, tf), ORACLE, dense_times=times)
    out = out if out.suffix == ".csv" else out / "trajectory.csv"
    tr.to_csv(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not (Path(args.data) / "manifest.json").exists():
        raise UsageError(f"{args.data}: no dataset manifest")
    data, man = load_datasets(args.data)
    d_u = data[0].control.knot_values.shape[-1]
    net = NetConfig.for_system(data[0].d_x, d_u, tuple(args.hidden))
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, patience=args.patience)
    hist = FitHistory()
    ens = fit_ensemble(data, net, args.members, cfg, seed=args.seed, history=hist)
    out = _out(args, "model")
    save_ensemble(out, ens, seed=args.seed, extra={"train_config": asdict(cfg), "dataset": str(args.data),
                                                   "history": hist.to_dict()})
    best = np.min(np.asarray(hist.val), axis=0) if hist.val else np.full(ens.M, np.nan)
    print(f"wrote {out.with_suffix('.csv')} ({ens.M} members, best val loss {np.array2string(best, precision=3)})")
    return EXIT_OK


def cmd_plan(args) -> int:
    """Open-loop solve over [t0, t0 + H] from x0; the reported cost is a replay of the written control."""
    task = _task(args)
    model = as_ensemble(_model(args.model, task))
    cost, bounds = task.cost(), task.control_bounds()
    H = args.horizon or task.horizon
    span = (task.t0, task.t0 + H)
    x0 = np.array(args.x0 if args.x0 else task.x0, dtype=float)
    report: dict = {"system": args.system, "planner": args.planner, "model": args.model, "horizon": H,
                    "seed": args.seed}
    if args.planner.startswith("pmp"):
        pb = ShootingProblem(model, cost, x0, span, task.segments, bounds,
                             solver=SolverConfig(max_iter=args.iterations), dt=task.dt)
        sol = (solve_mean_u if args.planner == "pmp_mean_u" else solve_mean_h)(pb)
        control = sol.control
        report["solve"] = json.loads(sol.report.to_json())
        report["solve"].pop("history", None)
    else:
        times = _knot_times(*span, task.dt)
        obj = MeanCostObjective(model, cost, x0, span, times, bounds)
        if args.planner == "icem":
            from .direct import IcemConfig
            knots, _ = icem_plan(obj, bounds, times.size, IcemConfig(iterations=args.iterations), seed=args.seed)
        else:
            from .direct import GradPlanConfig
            fn = adam_plan if args.planner == "adam" else bfgs_plan
            kw = {"seed": args.seed} if args.planner == "adam" else {}
            knots, _ = fn(obj, bounds, times.size, GradPlanConfig(iterations=args.iterations), **kw)
        control = ControlSignal(times, knots, "cubic")
    out = _out(args, f"plan_{args.system}_{args.planner}")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "control.csv", ["t"] + [f"u{i + 1}" for i in range(bounds.d_u)],
              np.column_stack([control.knot_times, control.knot_values]))
    # reload so the reported number is exactly what a reader of control.csv gets
    replay = read_control(out / "control.csv")
    costs = ensemble_trajectory_costs(model, cost, x0, replay, span, REPLAY, bounds)
    report["cost"] = float(np.mean(costs))
    report["member_costs"] = [float(c) for c in costs]
    tt = np.linspace(*span, int(round(H / task.dt)) * 4 + 1)
    d = model.d_x
    tr = integrate_adaptive(lambda t, x: model.f(x.reshape(model.M, d),
                                                    np.broadcast_to(bounds.clip(replay(t)), (model.M, bounds.d_u))).ravel(),
                            np.tile(x0, model.M), span, REPLAY, dense_times=tt)
    Trajectory(tt, tr.states).to_csv(out / "trajectory.csv")
    (out / "report.json").write_text(json.dumps(report, indent=2, default=float))
    print(f"cost {report['cost']:.6f}; wrote {out}")
    return EXIT_OK


def read_control(path) -> ControlSignal:
    _, data = read_table(path)
    return ControlSignal(data[:, 0], data[:, 1:], "cubic")


def replay_cost(model, task, x0, control: ControlSignal, horizon=None) -> float:
    span = (task.t0, task.t0 + (horizon or task.horizon))
    return float(np.mean(ensemble_trajectory_costs(model, task.cost(), x0, control, span, REPLAY,
                                                   task.control_bounds())))


def cmd_mpc(args) -> int:
    task = _task(args)
    model = _model(args.model, task)
    cfg = ExperimentConfig(name=f"mpc_{args.system}", task=task, planners=(args.planner,), seed=args.seed,
                           output_dir=args.out)
    if args.rtol:
        cfg = replace(cfg, planning_rtol=args.rtol, direct_rtol=args.rtol)
    if args.iterations:
        cfg = replace(cfg, task=replace(task, iterations=args.iterations))
    kind = "true" if args.model == "true" else ("prob_node" if as_ensemble(model).M > 1 else "deterministic_node")
    out = cfg.out_dir()
    rec, res = run_single(cfg, args.planner, model, kind, args.seed, out)
    res.trajectory.to_csv(out / "trajectory.csv")
    write_csv(out / "control.csv", ["t"] + [f"u{i + 1}" for i in range(res.controls.shape[1])],
              np.column_stack([res.trajectory.times, res.controls]))
    print(f"cost {rec.cost:.6f} in {rec.wall_time:.1f}s, {rec.flagged_steps} flagged steps; wrote {out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    if not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    try:
        cfg = load_config(args.config)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from exc
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.repetitions:
        kw["repetitions"] = args.repetitions
    if args.out:
        kw["output_dir"] = args.out
    if args.workers:
        kw["workers"] = args.workers
    cfg = replace(cfg, **kw)
    if cfg.mode == "offline":
        recs = run_offline_experiment(cfg)
        print(format_table(aggregate(recs)))
    else:
        for p in cfg.planners:
            c = run_online_rl(cfg, p)
            print(p, " ".join(f"{m:.3f}" for m in np.nanmean(c, axis=0)))
    return EXIT_OK


def cmd_compare(args) -> int:
    recs: list[ResultRecord] = []
    for p in args.records:
        p = Path(p)
        if p.is_dir():
            sub = p / "records" if (p / "records").is_dir() else p
            recs += load_records(sub)
        elif p.is_file():
            recs.append(ResultRecord.from_json(p.read_text()))
        else:
            raise UsageError(f"{p} not found")
    if not recs:
        raise UsageError("no records found")
    rows = aggregate(recs)
    out = Path(args.out) if args.out else output_root() / "compare.csv"
    write_table(rows, out)
    print(format_table(rows))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probpmp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, system=True):
        if system:
            sp.add_argument("--system", default="vdp", choices=sorted(TABLE_SETTINGS))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output path (default under $PROBPMP_OUTPUT or ./runs)")

    s = sub.add_parser("simulate", help="roll out a system to CSV, or generate a dataset with --trials")
    common(s)
    s.add_argument("--x0", type=float, nargs="+")
    s.add_argument("--tf", type=float)
    s.add_argument("--amplitude", type=float, default=0.0, help="Schroeder sweep amplitude (0: no control)")
    s.add_argument("--trials", type=int, default=0)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("train", help="fit an ensemble to a dataset directory")
    common(s, system=False)
    s.add_argument("--data", required=True)
    s.add_argument("--members", type=int, default=5)
    s.add_argument("--hidden", type=int, nargs="+", default=[32, 32])
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--patience", type=int, default=30)
    s.add_argument("--lr", type=float, default=1e-3)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("plan", help="open-loop plan from x0 over one horizon")
    common(s)
    s.add_argument("--planner", default="pmp_mean_h", choices=PLANNERS)
    s.add_argument("--model", default="true", help="'true' or a saved ensemble path")
    s.add_argument("--x0", type=float, nargs="+")
    s.add_argument("--horizon", type=float)
    s.add_argument("--iterations", type=int, default=50)
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("mpc", help="closed-loop run against the true plant")
    common(s)
    s.add_argument("--planner", default="pmp_mean_h", choices=PLANNERS)
    s.add_argument("--model", default="true")
    s.add_argument("--iterations", type=int)
    s.add_argument("--rtol", type=float, help="planning integrator tolerance (default 1e-6 shooting, 1e-4 direct)")
    s.set_defaults(fn=cmd_mpc)

    s = sub.add_parser("experiment", help="offline or online harness from a YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--repetitions", type=int)
    s.add_argument("--workers", type=int, help="parallel repetitions (process pool)")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_experiment)

    s = sub.add_parser("compare", help="aggregate result records into a mean/std table")
    s.add_argument("records", nargs="+", help="record files or directories")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_compare)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
