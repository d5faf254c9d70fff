"""Receding-horizon control of a simulated plant with interchangeable planners."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .direct import GradPlanConfig, IcemConfig, MeanCostObjective, adam_plan, bfgs_plan, icem_plan
from .integrate import (ControlSignal, DivergenceError, IntegratorConfig, NonConvergenceError, ORACLE, PLANNING,
                        Trajectory, integrate_adaptive)
from .ocp import ControlBounds, QuadraticCost
from .pmp import ShootingProblem, ShootingVars, SolverConfig, solve_mean_h, solve_mean_u, warm_start_from_trajectory, warm_start_shift
from .systems import as_ensemble

Array = np.ndarray
log = logging.getLogger(__name__)

PLANNERS = ("pmp_mean_h", "pmp_mean_u", "icem", "adam", "bfgs")


@dataclass(frozen=True)
class MpcConfig:
    horizon: float
    dt: float
    iterations_per_step: int = 15
    planner: str = "pmp_mean_h"
    warm_start: bool = True
    segments: int = 4
    integrator: IntegratorConfig = PLANNING
    icem: IcemConfig = IcemConfig()
    grad: GradPlanConfig = GradPlanConfig()
    lm_tol: float = 1e-6
    broyden_steps: int = 0  # secant Jacobian updates between finite-difference ones
    lm_damping: float = 1e-3  # initial LM damping relative to max diag(J^T J)
    first_iterations: Optional[int] = None  # budget for the cold first step, default iterations_per_step
    # plans computed from the measurement at t_k act on [t_{k+delay}, t_{k+delay+1}]
    delay_steps: int = 0

    def __post_init__(self):
        if not (self.dt > 0 and self.horizon >= self.dt):
            raise ValueError("need horizon >= dt > 0")
        if self.iterations_per_step < 1:
            raise ValueError("iterations_per_step must be >= 1")
        if self.planner not in PLANNERS:
            raise ValueError(f"unknown planner {self.planner!r}; choose from {PLANNERS}")
        if self.segments < 1:
            raise ValueError("segments must be >= 1")


@dataclass
class Plant:
    """True system with Gaussian measurement noise on the state."""

    system: object
    noise_sigma: float = 0.0
    seed: int = 0
    integrator: IntegratorConfig = ORACLE

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        self.rng = np.random.default_rng([self.seed, 31337])

    def measure(self, x: Array) -> Array:
        if self.noise_sigma == 0:
            return np.array(x, dtype=float)
        return x + self.noise_sigma * self.rng.standard_normal(np.shape(x))

    def advance(self, x: Array, control: ControlSignal, t0: float, t1: float, cost: QuadraticCost,
                bounds: ControlBounds, sample_times=None) -> tuple[Array, float, Trajectory]:
        """Integrate the true dynamics over [t0, t1]; returns end state, running cost and samples."""
        d = x.size

        def rhs(t, y):
            u = bounds.clip(control(t))
            xx = y[:d]
            return np.concatenate([self.system.f(xx, u, t), [cost.L(xx, u)]])

        y0 = np.concatenate([x, [0.0]])
        tr = integrate_adaptive(rhs, y0, (t0, t1), self.integrator, dense_times=sample_times)
        return tr.final[:d].copy(), float(tr.final[d]), tr


# ---------------------------------------------------------------------------
# Planners with warm-start state
# ---------------------------------------------------------------------------

def _knot_times(t: float, t_end: float, dt: float) -> Array:
    n = int(np.floor((t_end - t) / dt + 1e-9))
    k = t + dt * np.arange(n + 1)
    if t_end - k[-1] > 1e-9:
        k = np.append(k, t_end)
    else:
        k[-1] = t_end
    return k


class Planner:
    name = "base"

    def __init__(self, model, cost: QuadraticCost, bounds: ControlBounds, config: MpcConfig, seed: int = 0):
        self.model = as_ensemble(model)
        self.cost = cost
        self.bounds = bounds
        self.config = config
        self.seed = seed
        self.prev: Optional[ControlSignal] = None
        self.step = 0
        self.info: dict = {}

    def iterations(self) -> int:
        c = self.config
        if self.step == 0 and c.first_iterations is not None:
            return c.first_iterations
        return c.iterations_per_step

    def initial_knots(self, times: Array) -> Array:
        if self.prev is None or not self.config.warm_start:
            return np.zeros((times.size, self.bounds.d_u))
        return self.bounds.clip(self.prev.sample(times))

    def plan(self, x: Array, t: float, t_end: float) -> ControlSignal:
        raise NotImplementedError

    def __call__(self, x, t, t_end) -> ControlSignal:
        sig = self.plan(np.asarray(x, dtype=float), float(t), float(t_end))
        self.prev = sig
        self.step += 1
        return sig


class PmpPlanner(Planner):
    def __init__(self, *a, mean_u: bool = False, **kw):
        super().__init__(*a, **kw)
        self.mean_u = mean_u
        self.name = "pmp_mean_u" if mean_u else "pmp_mean_h"
        self.vars: Optional[ShootingVars] = None
        self.problem: Optional[ShootingProblem] = None
        self.traj = None

    def plan(self, x, t, t_end):
        c = self.config
        solver = SolverConfig(max_iter=self.iterations(), tol=c.lm_tol, broyden_steps=c.broyden_steps,
                              damping_init=c.lm_damping)
        pb = ShootingProblem(self.model, self.cost, x, (t, t_end), c.segments, self.bounds, c.integrator, solver, c.dt)
        init = None
        if self.traj is not None and c.warm_start:
            init = warm_start_from_trajectory(self.traj, pb)
        elif self.vars is not None and c.warm_start:
            init = warm_start_shift(self.vars, t - self.problem.t_span[0], self.problem, pb)
        sol = (solve_mean_u if self.mean_u else solve_mean_h)(pb, init)
        self.vars, self.problem = sol.vars, pb
        self.traj = sol.trajectories if np.all(np.isfinite(sol.trajectories.lam)) else None
        rep = sol.report
        self.info = {"converged": rep.converged, "iterations": rep.iterations, "residual": rep.residual_norm}
        return sol.control


class IcemPlanner(Planner):
    name = "icem"

    def plan(self, x, t, t_end):
        c = self.config
        times = _knot_times(t, t_end, c.dt)
        obj = MeanCostObjective(self.model, self.cost, x, (t, t_end), times, self.bounds, c.integrator)
        if not hasattr(self, "carry") or not c.warm_start:
            self.carry = {}
        elif self.carry.get("elites") is not None:
            # shift carried elites one knot forward, repeating the tail, and trim to the new length
            el = self.carry["elites"]
            el = np.concatenate([el[:, 1:], el[:, -1:]], axis=1)
            if el.shape[1] >= times.size:
                el = el[:, :times.size]
            else:
                el = np.concatenate([el, np.repeat(el[:, -1:], times.size - el.shape[1], axis=1)], axis=1)
            self.carry["elites"] = el
        init = self.initial_knots(times) if self.prev is not None else None
        cfg = replace(c.icem, iterations=self.iterations())
        knots, best = icem_plan(obj, self.bounds, times.size, cfg, seed=hash((self.seed, self.step)) % 2 ** 31,
                                init_mean=init, carry=self.carry)
        self.info = {"cost": best, "evaluations": obj.n_evals}
        return ControlSignal(times, knots, "cubic")


class GradPlanner(Planner):
    def __init__(self, *a, method: str = "adam", **kw):
        super().__init__(*a, **kw)
        self.name = method

    def plan(self, x, t, t_end):
        c = self.config
        times = _knot_times(t, t_end, c.dt)
        obj = MeanCostObjective(self.model, self.cost, x, (t, t_end), times, self.bounds, c.integrator)
        init = self.initial_knots(times)
        cfg = replace(c.grad, iterations=self.iterations())
        if self.name == "adam":
            knots, best = adam_plan(obj, self.bounds, times.size, cfg, seed=self.seed, init=init)
        else:
            knots, best = bfgs_plan(obj, self.bounds, times.size, cfg, init=init)
        self.info = {"cost": best, "evaluations": obj.n_evals}
        return ControlSignal(times, knots, "cubic")


def make_planner(name: str, model, cost: QuadraticCost, bounds: ControlBounds, config: MpcConfig,
                 seed: int = 0) -> Planner:
    if name in ("pmp_mean_h", "pmp_mean_u"):
        return PmpPlanner(model, cost, bounds, config, seed=seed, mean_u=name == "pmp_mean_u")
    if name == "icem":
        return IcemPlanner(model, cost, bounds, config, seed)
    if name in ("adam", "bfgs"):
        return GradPlanner(model, cost, bounds, config, seed=seed, method=name)
    raise ValueError(f"unknown planner {name!r}; choose from {PLANNERS}")


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

@dataclass
class MpcResult:
    trajectory: Trajectory  # true noise-free states on the sample grid
    controls: Array  # applied (clipped) control at the same times
    applied: ControlSignal  # the applied control as a dense cubic signal
    cost: float
    step_info: list = field(default_factory=list)
    flagged_steps: list = field(default_factory=list)
    wall_time: float = 0.0
    measured_times: Optional[Array] = None  # step times plus t_f
    measurements: Optional[Array] = None  # noisy observations the planner saw (last one after the final step)

    def recomputed_cost(self, cost: QuadraticCost) -> float:
        """Trapezoid re-evaluation of the realized cost from the stored true trajectory."""
        L = cost.L(self.trajectory.states, self.controls)
        return float(np.trapezoid(L, self.trajectory.times) + cost.phi(self.trajectory.final))


def run_mpc(planner, model, plant: Plant, cost: QuadraticCost, x0, t_f: float, config: MpcConfig,
            bounds: ControlBounds, seed: int = 0, t0: float = 0.0, samples_per_step: int = 10) -> MpcResult:
    """Plan on noisy measurements, apply the first dt of each plan to the true plant.

    ``planner`` is a planner name or a Planner instance. The realized cost is
    integrated along the true trajectory against the full-task cost.
    """
    if not isinstance(planner, Planner):
        planner = make_planner(planner, model, cost, bounds, config, seed)
    n_steps = int(round((t_f - t0) / config.dt))
    if n_steps < 1 or abs(t0 + n_steps * config.dt - t_f) > 1e-9 * max(1.0, t_f):
        raise ValueError("t_f - t0 must be a positive multiple of dt")
    x = np.asarray(x0, dtype=float).copy()
    running = 0.0
    times, states, controls = [], [], []
    infos, flagged = [], []
    ys = []
    start = time.perf_counter()
    fallback: Optional[ControlSignal] = None
    queue: list = []
    for k in range(n_steps):
        t = t0 + k * config.dt
        t_next = t0 + (k + 1) * config.dt
        t_end = min(t + config.horizon, t_f)
        y = plant.measure(x)
        ys.append(y)
        t_plan = time.perf_counter()
        try:
            sig = planner(y, t, t_end)
        except (DivergenceError, NonConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("step %d: planner failed (%s); reusing previous plan", k, exc)
            flagged.append(k)
            planner.step += 1
            sig = fallback if fallback is not None else ControlSignal([t, t_next], np.zeros((2, bounds.d_u)))
        fallback = sig
        infos.append(dict(planner.info, t=t, wall=time.perf_counter() - t_plan))
        if config.delay_steps:
            if k == 0:
                queue = [sig] * config.delay_steps
            queue.append(sig)
            sig = queue.pop(0)
        grid = np.linspace(t, t_next, samples_per_step + 1)
        x, c, tr = plant.advance(x, sig, t, t_next, cost, bounds, sample_times=grid)
        running += c
        sl = slice(0, None) if k == 0 else slice(1, None)
        times.append(grid[sl])
        states.append(tr.states[sl, :x.size])
        controls.append(bounds.clip(np.stack([sig(s) for s in grid[sl]])))
    times = np.concatenate(times)
    states = np.concatenate(states)
    controls = np.concatenate(controls)
    ys.append(plant.measure(x))
    total = running + float(cost.phi(x))
    applied = ControlSignal(times, controls, "cubic")
    res = MpcResult(Trajectory(times, states), controls, applied, total, infos, flagged,
                    time.perf_counter() - start, t0 + config.dt * np.arange(n_steps + 1), np.array(ys))
    return res
