"""Forward multiple shooting for the mean-Hamiltonian boundary value problem.

Decision variables are the costates at the start of each segment for each
member, (M, S, d_x). States are chained forward segment by segment, so only
costate continuity and the transversality condition enter the residual.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .integrate import (ControlSignal, DivergenceError, IntegratorConfig, NonConvergenceError, PLANNING,
                        integrate_adaptive)
from .ocp import ControlBounds, QuadraticCost, ensemble_trajectory_costs, minimize_hamiltonian_batch
from .systems import as_ensemble

Array = np.ndarray
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 50
    tol: float = 1e-6
    damping_init: float = 1e-3
    fd_step: float = 1e-6
    argmin_tol: float = 1e-8
    argmin_max_iter: int = 50
    # rank-one secant updates between finite-difference Jacobians (0 = always recompute)
    broyden_steps: int = 0

    def __post_init__(self):
        if self.max_iter < 0 or self.tol <= 0 or self.damping_init <= 0 or self.fd_step <= 0:
            raise ValueError("invalid solver configuration")


@dataclass(frozen=True)
class ShootingProblem:
    ensemble: object
    cost: QuadraticCost
    x0: Array
    t_span: tuple
    segments: int
    bounds: ControlBounds
    integrator: IntegratorConfig = PLANNING
    solver: SolverConfig = SolverConfig()
    dt: float = 0.05  # knot spacing of the returned control signal

    def __post_init__(self):
        ens = as_ensemble(self.ensemble)
        object.__setattr__(self, "ensemble", ens)
        x0 = np.asarray(self.x0, dtype=float).ravel()
        object.__setattr__(self, "x0", x0)
        t0, tf = map(float, self.t_span)
        object.__setattr__(self, "t_span", (t0, tf))
        if self.segments < 1:
            raise ValueError("need at least one segment")
        if not tf > t0:
            raise ValueError("empty horizon")
        if x0.size != ens.d_x or self.cost.d_x != ens.d_x:
            raise ValueError("state dimension mismatch")
        if self.bounds.d_u != ens.d_u or self.cost.d_u != ens.d_u:
            raise ValueError("control dimension mismatch")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def M(self) -> int:
        return self.ensemble.M

    @property
    def d_x(self) -> int:
        return self.ensemble.d_x

    @property
    def boundaries(self) -> Array:
        t0, tf = self.t_span
        return np.linspace(t0, tf, self.segments + 1)

    @property
    def knot_times(self) -> Array:
        t0, tf = self.t_span
        n = int(np.floor((tf - t0) / self.dt + 1e-9))
        k = t0 + self.dt * np.arange(n + 1)
        if tf - k[-1] > 1e-9:
            k = np.append(k, tf)
        else:
            k[-1] = tf
        return k

    def zeros(self) -> "ShootingVars":
        return ShootingVars(np.zeros((self.M, self.segments, self.d_x)))


@dataclass(frozen=True)
class ShootingVars:
    lam: Array

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float)
        if lam.ndim != 3:
            raise ValueError("costate guesses must have shape (M, S, d_x)")
        if not np.all(np.isfinite(lam)):
            raise ValueError("non-finite costate guess")
        object.__setattr__(self, "lam", lam)

    @property
    def size(self) -> int:
        return self.lam.size

    @property
    def shape(self) -> tuple:
        return self.lam.shape


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_norm: float
    cost_estimate: float
    failed_members: tuple = ()
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.residual_norm >= 0:
            self.residual_norm = float("inf")

    def to_json(self) -> str:
        d = asdict(self)
        d["failed_members"] = list(self.failed_members)
        return json.dumps(d, default=float)


@dataclass
class MemberTrajectories:
    """States, costates and pointwise controls of every member on a time grid."""

    times: Array
    x: Array  # (T, M, d_x)
    lam: Array  # (T, M, d_x)
    u: Array  # (T, d_u) shared or (T, M, d_u) per member
    costs: Array  # (M,) running plus terminal cost of each member

    def hamiltonians(self, ensemble, cost: QuadraticCost) -> Array:
        """Per-member Hamiltonian along the grid, (T, M)."""
        ens = as_ensemble(ensemble)
        u = self.u[:, None] if self.u.ndim == 2 else self.u
        u = np.broadcast_to(u, self.x.shape[:2] + (ens.d_u,))
        f = ens.f(np.swapaxes(self.x, 0, 1), np.swapaxes(u, 0, 1))
        H = cost.L(np.swapaxes(self.x, 0, 1), np.swapaxes(u, 0, 1)) + np.sum(np.swapaxes(self.lam, 0, 1) * f, -1)
        return H.T

    def mean_hamiltonian(self, ensemble, cost: QuadraticCost) -> Array:
        return self.hamiltonians(ensemble, cost).mean(axis=1)


class ShootingDivergence(DivergenceError):
    def __init__(self, message, t, state, segment: int, member: int):
        super().__init__(message, t, state)
        self.segment = segment
        self.member = member


class MeanHSolution(NamedTuple):
    control: ControlSignal
    trajectories: MemberTrajectories
    report: SolveReport
    vars: ShootingVars


class MeanUSolution(NamedTuple):
    control: ControlSignal
    report: SolveReport
    member_controls: Array  # (K, M, d_u) clamped member controls at the knots
    trajectories: MemberTrajectories
    vars: ShootingVars


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _make_rhs(problem: ShootingProblem, coupled: bool, holder: dict):
    ens, cost, bounds = problem.ensemble, problem.cost, problem.bounds
    d = problem.d_x
    Q2 = 2.0 * cost.Q
    xs = cost.x_star
    scfg = problem.solver

    def rhs(t, y):
        x = y[..., :d]
        lam = y[..., d:2 * d]
        u = minimize_hamiltonian_batch(ens, cost, x, lam, holder["u"], bounds, coupled,
                                       scfg.argmin_tol, scfg.argmin_max_iter, t)
        holder["u"] = u
        ub = u[None] if coupled else u
        fx, gx = ens.f_and_vjp_x(x, ub, lam, t)
        e = x - xs
        out = np.empty_like(y)
        out[..., :d] = fx
        out[..., d:2 * d] = -(e @ Q2 + gx)
        out[..., 2 * d] = cost.L(x, ub)
        return out

    return rhs


def _forward(problem: ShootingProblem, lam0: Array, coupled: bool, record_times: Optional[Array] = None):
    """Integrate B copies of the shooting system.

    lam0: (B, M, S, d_x). Returns the residual (B, M, S, d_x), the member
    costs (B, M) and, if record_times is given, the recorded grid states
    (T, M, B, 2 d_x + 1).
    """
    B, M, S, d = lam0.shape
    ens = problem.ensemble
    t_b = problem.boundaries
    d_u = ens.d_u
    holder = {"u": np.zeros((B, d_u)) if coupled else np.zeros((M, B, d_u))}
    rhs = _make_rhs(problem, coupled, holder)
    y = np.zeros((M, B, 2 * d + 1))
    y[..., :d] = problem.x0
    res = np.empty_like(lam0)
    rec = []
    for k in range(S):
        y[..., d:2 * d] = np.swapaxes(lam0[:, :, k], 0, 1)
        dense = None
        if record_times is not None:
            last = k == S - 1
            sel = (record_times >= t_b[k]) & ((record_times < t_b[k + 1]) | (last & (record_times <= t_b[k + 1])))
            dense = np.append(record_times[sel], t_b[k + 1])
        try:
            tr = integrate_adaptive(rhs, y, (t_b[k], t_b[k + 1]), problem.integrator, dense_times=dense)
        except (DivergenceError, NonConvergenceError) as exc:
            state = np.asarray(exc.state)
            bad = np.argwhere(~np.all(np.isfinite(state.reshape(M, -1)), axis=1))
            member = int(bad[0, 0]) if bad.size else -1
            raise ShootingDivergence(f"segment {k}: {exc}", exc.t, state, k, member) from exc
        if dense is not None:
            rec.append(tr.states[:-1])
        y = tr.states[-1].copy()
        lam_end = np.swapaxes(y[..., d:2 * d], 0, 1)
        if k < S - 1:
            res[:, :, k] = lam_end - lam0[:, :, k + 1]
        else:
            x_end = np.swapaxes(y[..., :d], 0, 1)
            res[:, :, k] = lam_end - problem.cost.grad_phi(x_end)
    x_end = np.swapaxes(y[..., :d], 0, 1)
    costs = np.swapaxes(y[..., 2 * d], 0, 1) + problem.cost.phi(x_end)
    if record_times is None:
        return res, costs, None
    return res, costs, np.concatenate(rec, axis=0)


def _record(problem: ShootingProblem, lam: Array, coupled: bool, record_times=None):
    knots = problem.knot_times
    times = knots if record_times is None else np.union1d(knots, np.asarray(record_times, dtype=float))
    res, costs, states = _forward(problem, lam[None], coupled, times)
    d = problem.d_x
    x = states[:, :, 0, :d]
    lm = states[:, :, 0, d:2 * d]
    T = times.size
    u0 = np.zeros((T, problem.ensemble.d_u)) if coupled else np.zeros((problem.M, T, problem.ensemble.d_u))
    u = minimize_hamiltonian_batch(problem.ensemble, problem.cost, np.swapaxes(x, 0, 1), np.swapaxes(lm, 0, 1), u0,
                                   problem.bounds, coupled, problem.solver.argmin_tol, problem.solver.argmin_max_iter)
    if not coupled:
        u = np.swapaxes(u, 0, 1)
    traj = MemberTrajectories(times, x, lm, u, costs[0])
    on_knots = np.searchsorted(times, knots)
    return res[0], traj, on_knots


def shooting_residual(problem: ShootingProblem, vars: ShootingVars, coupled: bool = True, record_times=None):
    """Residual vector (M*S*d_x,), the reconstructed control and member trajectories."""
    if vars.shape != (problem.M, problem.segments, problem.d_x):
        raise ValueError(f"expected vars of shape {(problem.M, problem.segments, problem.d_x)}, got {vars.shape}")
    res, traj, on_knots = _record(problem, vars.lam, coupled, record_times)
    u = traj.u[on_knots]
    if not coupled:
        u = u.mean(axis=1)
    control = ControlSignal(problem.knot_times, problem.bounds.clip(u), "cubic")
    return res.ravel(), control, traj


# ---------------------------------------------------------------------------
# Levenberg-Marquardt over independent problems sharing one integration
# ---------------------------------------------------------------------------

def _lm(problem: ShootingProblem, lam_init: Array, coupled: bool):
    """Damped Gauss-Newton on the shooting residual.

    Coupled: one problem with M*S*d_x unknowns. Uncoupled: M problems with
    S*d_x unknowns each; perturbation j is applied to every member at once,
    so the finite-difference Jacobian costs 1 + S*d_x integration copies.
    """
    cfg = problem.solver
    M, S, d = lam_init.shape
    P = 1 if coupled else M
    n = lam_init.size // P
    eps = cfg.fd_step

    def to_lam(v):  # (B, P, n) -> (B, M, S, d)
        return v.reshape(v.shape[0], M, S, d)

    def evaluate(v):
        res, costs, _ = _forward(problem, to_lam(v), coupled)
        return res.reshape(v.shape[0], P, n), costs

    def jacobian(v):
        V = np.repeat(v[None], n + 1, axis=0)
        idx = np.arange(n)
        V[idx + 1, :, idx] += eps
        R, _ = evaluate(V)
        J = (R[1:] - R[0]).transpose(1, 2, 0) / eps  # (P, n_res, n_var)
        return R[0], J

    v = lam_init.reshape(P, n).copy()
    hist = []
    try:
        r, J = jacobian(v)
    except ShootingDivergence as exc:
        log.warning("initial shooting pass diverged: %s", exc)
        return v, np.full((P, n), np.inf), np.zeros(P, int), hist
    norm2 = np.sum(r * r, axis=1)
    JtJ = np.einsum("pij,pik->pjk", J, J)
    mu = cfg.damping_init * np.maximum(np.max(np.diagonal(JtJ, axis1=1, axis2=2), axis=1), 1e-12)
    iters = np.zeros(P, int)
    since_fd = 0
    eye = np.eye(n)
    for it in range(cfg.max_iter):
        active = np.max(np.abs(r), axis=1) > cfg.tol
        if not active.any():
            break
        JtJ = np.einsum("pij,pik->pjk", J, J)
        g = np.einsum("pij,pi->pj", J, r)
        try:
            step = -np.linalg.solve(JtJ + mu[:, None, None] * eye, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -g / mu[:, None]
        step[~active] = 0.0
        v_try = v + step
        try:
            r_try, _ = evaluate(v_try[None])
            r_try = r_try[0]
        except ShootingDivergence:
            r_try = np.full_like(r, np.inf)
        n_try = np.sum(r_try * r_try, axis=1)
        accept = active & np.isfinite(n_try) & (n_try < norm2)
        iters += active
        if cfg.broyden_steps and np.all(np.isfinite(r_try)):
            # secant update on the step just tried, accepted or not
            dr = r_try - r - np.einsum("pij,pj->pi", J, step)
            ss = np.sum(step * step, axis=1)
            ok = active & (ss > 0)
            J[ok] += dr[ok, :, None] * step[ok, None, :] / ss[ok, None, None]
        v[accept] = v_try[accept]
        r[accept] = r_try[accept]
        norm2[accept] = n_try[accept]
        mu[accept] /= 10.0
        mu[active & ~accept] *= 10.0
        mu = np.clip(mu, 1e-20, 1e20)
        hist.append({"iteration": it + 1, "residual": float(np.max(np.abs(r))), "damping": float(np.max(mu))})
        log.debug("lm iteration %d residual %.3e damping %.1e", it + 1, hist[-1]["residual"], hist[-1]["damping"])
        done = np.max(np.abs(r), axis=1) <= cfg.tol
        if done.all() or it + 1 == cfg.max_iter:
            break
        if accept.any():
            since_fd += 1
            if not cfg.broyden_steps or since_fd > cfg.broyden_steps:
                try:
                    r_new, J = jacobian(v)
                    r = r_new
                    norm2 = np.sum(r * r, axis=1)
                    since_fd = 0
                except ShootingDivergence as exc:
                    log.warning("jacobian pass diverged: %s", exc)
                    break
    return v, r, iters, hist


def solve_mean_h(problem: ShootingProblem, init: Optional[ShootingVars] = None, record_times=None) -> MeanHSolution:
    """Minimize the mean Hamiltonian pointwise and solve the coupled boundary value problem."""
    lam0 = problem.zeros().lam if init is None else init.lam
    if lam0.shape != (problem.M, problem.segments, problem.d_x):
        raise ValueError("initial guess has the wrong shape")
    v, r, iters, hist = _lm(problem, lam0, True)
    lam = v.reshape(lam0.shape)
    res, traj, on_knots = _record(problem, lam, True, record_times)
    rn = float(np.max(np.abs(res)))
    converged = rn <= problem.solver.tol
    control = ControlSignal(problem.knot_times, problem.bounds.clip(traj.u[on_knots]), "cubic")
    report = SolveReport(converged, int(iters.max()), rn, float(np.mean(traj.costs)), (), hist)
    return MeanHSolution(control, traj, report, ShootingVars(lam))


def solve_mean_u(problem: ShootingProblem, init: Optional[ShootingVars] = None, record_times=None) -> MeanUSolution:
    """Solve each member's boundary value problem on its own, then average the clamped controls."""
    lam0 = problem.zeros().lam if init is None else init.lam
    if lam0.shape != (problem.M, problem.segments, problem.d_x):
        raise ValueError("initial guess has the wrong shape")
    v, r, iters, hist = _lm(problem, lam0, False)
    lam = v.reshape(lam0.shape)
    res, traj, on_knots = _record(problem, lam, False, record_times)
    member_res = np.max(np.abs(res.reshape(problem.M, -1)), axis=1)
    ok = member_res <= problem.solver.tol
    failed = tuple(int(i) for i in np.flatnonzero(~ok))
    u_knots = problem.bounds.clip(traj.u[on_knots])  # (K, M, d_u)
    use = ok if ok.any() else np.ones(problem.M, bool)
    control = ControlSignal(problem.knot_times, problem.bounds.clip(u_knots[:, use].mean(axis=1)), "cubic")
    cost = float(np.mean(ensemble_trajectory_costs(problem.ensemble, problem.cost, problem.x0, control,
                                                    problem.t_span, problem.integrator)))
    if failed:
        log.info("mean-u: members %s did not converge", failed)
    report = SolveReport(not failed, int(iters.max()), float(member_res.max()), cost, failed, hist)
    return MeanUSolution(control, report, u_knots, traj, ShootingVars(lam))


def warm_start_shift(vars: ShootingVars, shift: float, problem: ShootingProblem,
                     new_problem: Optional[ShootingProblem] = None) -> ShootingVars:
    """Move segment guesses forward in time by ``shift`` seconds.

    Guesses are treated as samples at the old segment start times and
    linearly interpolated at the new ones; past the last old segment the last
    guess is repeated. ``new_problem`` allows a different (shorter) horizon.
    """
    old_t = problem.boundaries[:-1]
    if new_problem is None:
        new_t = old_t + shift
        S_new = problem.segments
    else:
        new_t = new_problem.boundaries[:-1]
        S_new = new_problem.segments
    lam = vars.lam
    M, S, d = lam.shape
    if S == 1:
        return ShootingVars(np.repeat(lam, S_new, axis=1))
    q = np.clip(new_t - old_t[0], 0.0, old_t[-1] - old_t[0])
    tau = old_t[1] - old_t[0]
    pos = q / tau
    i0 = np.minimum(np.floor(pos + 1e-9).astype(int), S - 1)
    i1 = np.minimum(i0 + 1, S - 1)
    w = np.clip(pos - i0, 0.0, 1.0)[None, :, None]
    out = (1.0 - w) * lam[:, i0] + w * lam[:, i1]
    return ShootingVars(out)


def warm_start_from_trajectory(traj: MemberTrajectories, new_problem: ShootingProblem) -> ShootingVars:
    """Costate guesses read off a previous solution at the new segment start times.

    Much closer than shifting the old segment guesses, since the new starts
    fall between old boundaries where the recorded costate is known. Times past
    the recorded range take the nearest recorded value.
    """
    T, M, d = traj.lam.shape
    if M != new_problem.M or d != new_problem.d_x:
        raise ValueError(f"trajectory has {M} members of dim {d}, problem expects "
                         f"{new_problem.M} of dim {new_problem.d_x}")
    t = new_problem.boundaries[:-1]
    flat = traj.lam.reshape(T, M * d)
    out = np.stack([np.interp(t, traj.times, flat[:, j]) for j in range(M * d)], axis=-1)
    return ShootingVars(out.reshape(t.size, M, d).transpose(1, 0, 2).copy())
