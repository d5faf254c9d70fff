"""Offline and online model-based RL harnesses on top of the MPC loop.

Configs mirror the per-system settings table (cost weights, noise, bounds,
x0, x*, horizon, step) and can be loaded from YAML. Every run writes one JSON
record; ``aggregate`` turns records into mean/std cells.
"""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from .direct import GradPlanConfig, IcemConfig
from .integrate import ControlSignal, DivergenceError, IntegratorConfig, NonConvergenceError, schroeder_sweep
from .mpc import PLANNERS, MpcConfig, Plant, run_mpc
from .neural import NetConfig
from .ocp import ControlBounds, QuadraticCost
from .systems import make_system
from .training import ExcitationConfig, TrainConfig, TrialDataset, fit_ensemble, generate_offline_dataset

Array = np.ndarray
log = logging.getLogger(__name__)

MODEL_KINDS = ("true", "deterministic_node", "prob_node")
OUTPUT_ENV = "PROBPMP_OUTPUT"


def output_root(default="runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskConfig:
    """One control task: system, quadratic cost, bounds and MPC timing."""

    system: str
    params: dict = field(default_factory=dict)
    q: tuple = (1.0, 1.0)
    qf: tuple = (1.0, 1.0)
    r: tuple = (0.5,)
    sigma: float = 0.01
    bounds: tuple = (-2.0, 2.0)
    x0: tuple = (1.0, 1.0)
    x_star: tuple = (0.0, 0.0)
    t0: float = 0.0
    tf: float = 10.0
    dt: float = 0.05
    horizon: float = 3.0
    segments: int = 4
    iterations: int = 15

    def __post_init__(self):
        for name in ("q", "qf", "r", "bounds", "x0", "x_star"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not (self.dt > 0 and self.horizon >= self.dt and self.tf > self.t0):
            raise ValueError("invalid timing")

    def make_system(self):
        return make_system(self.system, **self.params)

    def cost(self) -> QuadraticCost:
        return QuadraticCost.diagonal(self.q, self.qf, self.r, self.x_star)

    def control_bounds(self) -> ControlBounds:
        lo, hi = self.bounds
        return ControlBounds.box(lo, hi, len(self.r))

    def mpc_config(self, planner: str, integrator: IntegratorConfig = IntegratorConfig(), **kw) -> MpcConfig:
        return MpcConfig(self.horizon, self.dt, self.iterations, planner, segments=self.segments,
                         integrator=integrator, **kw)


@dataclass(frozen=True)
class DatasetConfig:
    n_trials: int = 25
    trial_length: float = 10.0
    obs_interval: Optional[float] = None  # defaults to the task dt
    amplitude: Optional[float] = None  # defaults to the upper control bound
    n_harmonics: int = 8
    init_box: tuple = ((-3.0, 3.0), (-3.0, 3.0))

    def __post_init__(self):
        object.__setattr__(self, "init_box", tuple(tuple(float(v) for v in b) for b in self.init_box))
        if self.n_trials < 1 or self.trial_length <= 0:
            raise ValueError("need n_trials >= 1 and trial_length > 0")


@dataclass(frozen=True)
class ModelConfig:
    M: int = 5
    hidden: tuple = (32, 32)
    train: TrainConfig = TrainConfig(epochs=300, patience=30)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.M < 1:
            raise ValueError("M must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    task: TaskConfig
    mode: str = "offline"  # or "online"
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    planners: tuple = ("pmp_mean_h", "pmp_mean_u", "icem", "adam", "bfgs")
    model_kinds: tuple = MODEL_KINDS
    repetitions: int = 15
    seed: int = 0
    online_trials: int = 10
    planning_rtol: float = 1e-6  # shooting planners (finite-difference Jacobian needs the accuracy)
    direct_rtol: float = 1e-4  # sampling and gradient planners
    icem: IcemConfig = IcemConfig()
    grad: GradPlanConfig = GradPlanConfig()
    output_dir: Optional[str] = None
    workers: int = 1  # process pool over repetitions

    def __post_init__(self):
        object.__setattr__(self, "planners", tuple(self.planners))
        object.__setattr__(self, "model_kinds", tuple(self.model_kinds))
        if self.mode not in ("offline", "online"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        bad = [p for p in self.planners if p not in PLANNERS]
        if bad:
            raise ValueError(f"unknown planners {bad}")
        bad = [k for k in self.model_kinds if k not in MODEL_KINDS]
        if bad:
            raise ValueError(f"unknown model kinds {bad}")

    def integrator(self, planner: str = "pmp_mean_h") -> IntegratorConfig:
        rtol = self.planning_rtol if planner.startswith("pmp") else self.direct_rtol
        return IntegratorConfig(rtol=rtol, atol=rtol * 1e-2)

    def mpc_config(self, planner: str) -> MpcConfig:
        return self.task.mpc_config(planner, self.integrator(planner), icem=self.icem, grad=self.grad)

    def out_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else output_root() / self.name

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _build(cls, d: dict):
    """Dataclass from a nested dict, recursing into dataclass-typed defaults."""
    if d is None:
        return cls()
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        default = names[k].default
        if hasattr(default, "__dataclass_fields__") and isinstance(v, dict):
            kw[k] = _build(type(default), v)
        else:
            kw[k] = v
    return cls(**kw)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "task" not in d or "name" not in d:
        raise ValueError("config needs 'name' and 'task'")
    task = d.pop("task")
    if isinstance(task, str):
        task = asdict(TABLE_SETTINGS[task])
    kw = {"task": TaskConfig(**task)}
    for key, cls in (("dataset", DatasetConfig), ("icem", IcemConfig), ("grad", GradPlanConfig)):
        if key in d:
            kw[key] = _build(cls, d.pop(key))
    if "model" in d:
        m = dict(d.pop("model"))
        train = m.pop("train", None)
        mc = ModelConfig(**m)
        kw["model"] = replace(mc, train=_build(TrainConfig, train)) if train is not None else mc
    return ExperimentConfig(**kw, **d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ValueError(f"{path}: expected a mapping")
    return config_from_dict(d)


TABLE_SETTINGS = {
    "vdp": TaskConfig("vdp", {"mu": 1.5}, (1, 1), (1, 1), (0.5,), 0.01, (-2, 2), (1, 1), (0, 0),
                      0.0, 10.0, 0.05, 3.0, segments=4, iterations=15),
    "cartpole": TaskConfig("cartpole", {"l": 1.0, "m": 1.0, "Mc": 1.0, "g": 9.81}, (1, 1, 0.1, 0.1), (1, 5, 1, 1),
                           (0.05,), 0.0, (-20, 20), (0, 0, 0, 0), (1, math.pi, 0, 0), 0.0, 5.0, 0.02, 1.0,
                           segments=2, iterations=25),
    # the settings table gives no iteration count for Duffing; 15 as for Van der Pol
    "duffing": TaskConfig("duffing", {"alpha": -1.0, "beta": 2.0, "delta": 0.2, "gamma": 1.0}, (5, 5), (5, 5),
                          (1.0,), 0.01, (-2, 2), (1.5, 1), (0, 0), 0.0, 5.0, 0.05, 2.0, segments=5, iterations=15),
}

DATASETS = {
    "vdp": DatasetConfig(25, 10.0, None, 2.0, 8, ((-3, 3), (-3, 3))),
    "cartpole": DatasetConfig(50, 5.0, None, 10.0, 8, ((-1, 2), (0, 2 * math.pi), (-2, 2), (-3, 3))),
    "duffing": DatasetConfig(1, 5.0, None, 2.0, 8, ((-2, 2), (-2, 2))),
}


def preset(system: str, mode: str = "offline", **kw) -> ExperimentConfig:
    task = TABLE_SETTINGS[system]
    base = dict(name=f"{system}_{mode}", task=task, mode=mode, dataset=DATASETS[system])
    if mode == "online":
        base.update(planners=("pmp_mean_h", "icem"), repetitions=10)
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class ResultRecord:
    planner: str
    model_kind: str
    seed: int
    cost: float
    wall_time: float
    diagnostics: Optional[str] = None  # path of the per-step info file
    trial: Optional[int] = None
    experiment: str = ""
    flagged_steps: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ResultRecord":
        return cls(**json.loads(s))

    def filename(self) -> str:
        t = "" if self.trial is None else f"_t{self.trial:02d}"
        return f"{self.model_kind}_{self.planner}_s{self.seed}{t}.json"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_record(rec: ResultRecord, directory) -> Path:
    path = Path(directory) / rec.filename()
    _atomic_write(path, rec.to_json() + "\n")
    return path


def load_records(directory) -> list[ResultRecord]:
    return [ResultRecord.from_json(p.read_text()) for p in sorted(Path(directory).glob("*.json"))]


def aggregate(records: Sequence[ResultRecord]) -> list[dict]:
    """Per (planner, model_kind) cell: count, mean and population std of the costs."""
    cells: dict = {}
    for r in records:
        cells.setdefault((r.planner, r.model_kind), []).append(r.cost)
    rows = []
    for (p, k), c in sorted(cells.items(), key=lambda kv: (PLANNERS.index(kv[0][0]) if kv[0][0] in PLANNERS else 99,
                                                             MODEL_KINDS.index(kv[0][1]))):
        c = np.asarray(c, dtype=float)
        rows.append({"planner": p, "model_kind": k, "n": int(c.size), "mean": float(c.mean()), "std": float(c.std())})
    return rows


def write_table(rows: Sequence[dict], path) -> None:
    """Long-format CSV, one row per cell."""
    lines = ["planner,model_kind,n,mean,std"]
    lines += [f"{r['planner']},{r['model_kind']},{r['n']},{r['mean']!r},{r['std']!r}" for r in rows]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def format_table(rows: Sequence[dict]) -> str:
    """Planners down, model kinds across, 'mean +- std' cells."""
    kinds = [k for k in MODEL_KINDS if any(r["model_kind"] == k for r in rows)]
    planners = list(dict.fromkeys(r["planner"] for r in rows))
    cell = {(r["planner"], r["model_kind"]): r for r in rows}
    out = ["method".ljust(12) + "".join(k.rjust(22) for k in kinds)]
    for p in planners:
        s = p.ljust(12)
        for k in kinds:
            r = cell.get((p, k))
            txt = "-" if r is None else (f"{r['mean']:.2f}" if r["n"] == 1 else f"{r['mean']:.2f} +- {r['std']:.2f}")
            s += txt.rjust(22)
        out.append(s)
    return "\n".join(out)


# ---------------------------------------------------------------------------
# offline
# ---------------------------------------------------------------------------

def make_dataset(config: ExperimentConfig, seed: int) -> list[TrialDataset]:
    task, ds = config.task, config.dataset
    amp = ds.amplitude if ds.amplitude is not None else task.bounds[1]
    return generate_offline_dataset(task.make_system(), ds.n_trials, ds.trial_length, ds.obs_interval or task.dt,
                                    ExcitationConfig(amp, ds.n_harmonics), ds.init_box, task.sigma, seed)


def train_model(config: ExperimentConfig, data, M: int, seed: int):
    system = config.task.make_system()
    net = NetConfig.for_system(system.d_x, system.d_u, config.model.hidden)
    return fit_ensemble(data, net, M, config.model.train, seed=seed)


def train_pair(config: ExperimentConfig, data, seed: int) -> dict:
    """Deterministic and probabilistic models for one dataset, as requested by config.model_kinds.

    Members are trained independently (own init seed, own minibatch stream,
    own early stopping), so a single net trained with this seed is exactly
    member 0 of the ensemble; it is taken from there instead of retrained.
    """
    kinds = config.model_kinds
    out = {}
    if "prob_node" in kinds:
        out["prob_node"] = train_model(config, data, config.model.M, seed)
        if "deterministic_node" in kinds:
            out["deterministic_node"] = out["prob_node"].subset([0])
    elif "deterministic_node" in kinds:
        out["deterministic_node"] = train_model(config, data, 1, seed)
    return out


def run_single(config: ExperimentConfig, planner: str, model, model_kind: str, seed: int,
               record_dir=None) -> tuple[ResultRecord, object]:
    task = config.task
    system = task.make_system()
    cost, bounds = task.cost(), task.control_bounds()
    plant = Plant(system, task.sigma, seed=seed)
    res = run_mpc(planner, model, plant, cost, np.array(task.x0), task.tf, config.mpc_config(planner), bounds,
                  seed=seed, t0=task.t0)
    rec = ResultRecord(planner, model_kind, seed, res.cost, res.wall_time, experiment=config.name,
                       flagged_steps=len(res.flagged_steps))
    if record_dir is not None:
        diag = Path(record_dir) / "steps" / (rec.filename()[:-5] + ".steps.json")
        _atomic_write(diag, json.dumps(res.step_info, default=float))
        rec.diagnostics = str(diag)
        save_record(rec, Path(record_dir) / "records")
    return rec, res


def _pool_map(fn, arglists, workers: int, deadline: Optional[float] = None) -> list:
    """fn over argument tuples, in a process pool when workers > 1 (order kept).

    With a ``deadline`` (time.monotonic() value) no new batch of ``workers``
    calls starts after it has passed, and the results so far are returned.
    """
    out = []
    step = max(1, workers)
    for i in range(0, len(arglists), step):
        if deadline is not None and time.monotonic() >= deadline:
            log.warning("deadline passed after %d of %d runs", len(out), len(arglists))
            break
        batch = arglists[i:i + step]
        if step == 1 or len(batch) == 1:
            out += [fn(*a) for a in batch]
        else:
            with ProcessPoolExecutor(max_workers=len(batch)) as ex:
                out += list(ex.map(fn, *zip(*batch)))
    return out


def offline_repetition(config: ExperimentConfig, r: int, out=None, cells=None) -> list[ResultRecord]:
    """One dataset, its two models and the planner runs under them.

    ``cells`` optionally restricts the runs to (model_kind, planner) pairs.
    A repetition whose training blows up is logged and returns no records.
    """
    seed = config.seed + r
    try:
        data = make_dataset(config, seed)
        models = train_pair(config, data, seed)
    except (DivergenceError, NonConvergenceError, FloatingPointError) as exc:
        log.error("repetition %d excluded: training failed (%s)", r, exc)
        return []
    records = []
    for kind, model in models.items():
        for p in config.planners:
            if cells is not None:
                if (kind, p) not in cells:
                    continue
            elif kind == "deterministic_node" and p == "pmp_mean_u" and "pmp_mean_h" in config.planners:
                continue  # same solve as mean-H for one member
            rec, _ = run_single(config, p, model, kind, seed, out)
            records.append(rec)
            log.info("rep %d %s %s: %.4f (%.1fs)", r, kind, p, rec.cost, rec.wall_time)
    return records


def run_offline_experiment(config: ExperimentConfig, repetitions: Optional[Sequence[int]] = None,
                           write: bool = True, cells=None, deadline: Optional[float] = None) -> list[ResultRecord]:
    """Dataset, deterministic (M=1) and probabilistic (M) models per repetition, every planner under each model.

    Repetition r uses seed config.seed + r for data, training and plant noise,
    so results do not depend on config.workers. The known-dynamics cells are
    computed once (they do not depend on data). ``deadline`` (a
    time.monotonic() value) stops launching repetitions once passed.
    """
    out = config.out_dir() if write else None
    reps = list(range(config.repetitions) if repetitions is None else repetitions)
    records: list[ResultRecord] = []
    if "true" in config.model_kinds:
        system = config.task.make_system()
        for p in config.planners:
            if p == "pmp_mean_u" or (cells is not None and ("true", p) not in cells):
                continue  # mean-u is identical to mean-H for a single model
            rec, _ = run_single(config, p, system, "true", config.seed, out)
            records.append(rec)
            log.info("true %s: %.4f (%.1fs)", p, rec.cost, rec.wall_time)
    for recs in _pool_map(offline_repetition, [(config, r, out, cells) for r in reps], config.workers,
                          deadline):
        records += recs
    if write:
        rows = aggregate(records)
        write_table(rows, out / "table.csv")
        _atomic_write(out / "config.json", json.dumps(config.to_dict(), indent=1))
    return records


# ---------------------------------------------------------------------------
# online
# ---------------------------------------------------------------------------

def random_policy_trial(config: ExperimentConfig, seed: int) -> tuple[TrialDataset, float]:
    """Trial 0: a Schroeder sweep applied open loop from x0."""
    task = config.task
    system, cost, bounds = task.make_system(), task.cost(), task.control_bounds()
    amp = config.dataset.amplitude if config.dataset.amplitude is not None else task.bounds[1]
    sweep = schroeder_sweep(amp, config.dataset.n_harmonics, task.tf - task.t0, seed=seed, d_u=system.d_u)
    sweep = ControlSignal(sweep.knot_times + task.t0, sweep.knot_values, sweep.interpolation, sweep.period)
    plant = Plant(system, task.sigma, seed=seed)
    times = task.t0 + task.dt * np.arange(int(round((task.tf - task.t0) / task.dt)) + 1)
    xT, c, tr = plant.advance(np.array(task.x0), sweep, task.t0, task.tf, cost, bounds, sample_times=times)
    y = np.stack([plant.measure(x) for x in tr.states[:, :system.d_x]])
    return TrialDataset(times, y, sweep, 0), c + float(cost.phi(xT))


def online_repetition(config: ExperimentConfig, planner: str, r: int, out=None) -> Array:
    """Costs of trials 0..online_trials for repetition r."""
    seed = config.seed + r
    costs = np.full(config.online_trials + 1, np.nan)
    data, costs[0] = random_policy_trial(config, seed)
    data = [data]
    for n in range(1, config.online_trials + 1):
        ens = train_model(config, data, config.model.M, seed * 1000 + n)
        rec, res = run_single(config, planner, ens, "prob_node", seed * 1000 + n, None)
        rec.trial = n
        costs[n] = rec.cost
        data.append(TrialDataset(res.measured_times, res.measurements, res.applied, n))
        log.info("rep %d trial %d %s: %.4f (%.1fs)", r, n, planner, rec.cost, rec.wall_time)
        if out is not None:
            save_record(rec, out / "records")
    return costs


def run_online_rl(config: ExperimentConfig, planner: str = "pmp_mean_h", repetitions: Optional[Sequence[int]] = None,
                  write: bool = True, deadline: Optional[float] = None) -> Array:
    """Cost per (repetition, trial); column 0 is the random-policy trial.

    Each later trial retrains the ensemble from scratch on everything observed so
    far (seed offset by trial index), runs MPC on the true plant and appends the
    noisy measurements with the applied control. Repetitions not started by
    ``deadline`` (time.monotonic()) are left out of the returned rows.
    """
    out = config.out_dir() if write else None
    reps = list(range(config.repetitions) if repetitions is None else repetitions)
    rows = _pool_map(online_repetition, [(config, planner, r, out) for r in reps], config.workers, deadline)
    costs = np.array(rows).reshape(len(rows), config.online_trials + 1)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / f"online_{planner}.csv", costs, delimiter=",", fmt="%.17g")
    return costs


def known_dynamics_reference(config: ExperimentConfig, planner: str = "pmp_mean_h") -> float:
    rec, _ = run_single(config, planner, config.task.make_system(), "true", config.seed)
    return rec.cost
