"""Direct planners over spline knots: iCEM, Adam and projected BFGS."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import colorednoise
import numpy as np

from .integrate import ControlSignal, DivergenceError, IntegratorConfig, NonConvergenceError, PLANNING, integrate_adaptive
from .ocp import ControlBounds, QuadraticCost, ensemble_trajectory_costs
from .systems import as_ensemble

Array = np.ndarray
log = logging.getLogger(__name__)

SIMPSON_PANELS = 8  # quadrature sub-intervals per knot interval, must be even


@dataclass(frozen=True)
class IcemConfig:
    population: int = 64
    elite_frac: float = 0.125
    iterations: int = 15
    noise_beta: float = 2.0
    init_std: Optional[float] = None  # default half the control range
    min_std: float = 1e-3
    momentum: float = 0.1
    shift_elites: bool = True
    keep_elites_frac: float = 0.3

    def __post_init__(self):
        if not 0 < self.elite_frac < 1:
            raise ValueError("elite_frac must lie in (0, 1)")
        if self.population < 4:
            raise ValueError("population must be at least 4")
        if self.init_std is not None and self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.iterations < 1 or not 0 <= self.momentum < 1:
            raise ValueError("invalid iCEM configuration")

    @property
    def n_elites(self) -> int:
        return max(2, int(round(self.elite_frac * self.population)))


@dataclass(frozen=True)
class GradPlanConfig:
    iterations: int = 15
    learning_rate: float = 0.05
    gradient: str = "adjoint"  # or "finite_difference"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fd_step: float = 1e-5
    armijo: float = 1e-4
    gtol: float = 1e-9

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.gradient not in ("adjoint", "finite_difference"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _simpson_grid(knot_times: Array):
    """Uniform Simpson nodes inside every knot interval and their weights."""
    n = SIMPSON_PANELS
    base = np.array([1.0] + [4.0, 2.0] * (n // 2 - 1) + [4.0, 1.0])
    ts, ws = [], []
    for a, b in zip(knot_times[:-1], knot_times[1:]):
        t = np.linspace(a, b, n + 1)
        ts.append(t)
        ws.append(base * (b - a) / (3.0 * n))
    t = np.concatenate(ts)
    w = np.concatenate(ws)
    tq, inv = np.unique(t, return_inverse=True)  # merge shared interval ends
    wq = np.zeros(tq.size)
    np.add.at(wq, inv, w)
    return tq, wq


class MeanCostObjective:
    """Ensemble-mean trajectory cost as a function of control knots (K, d_u).

    Calling with a stack (N, K, d_u) evaluates a whole population in one
    batched integration.
    """

    def __init__(self, ensemble, cost: QuadraticCost, x0, t_span, knot_times=None, bounds: Optional[ControlBounds] = None,
                 integrator: IntegratorConfig = PLANNING, n_knots: Optional[int] = None):
        self.ensemble = as_ensemble(ensemble)
        self.cost = cost
        self.x0 = np.asarray(x0, dtype=float).ravel()
        self.t_span = (float(t_span[0]), float(t_span[1]))
        if knot_times is None:
            knot_times = np.linspace(*self.t_span, n_knots or 2)
        self.knot_times = np.asarray(knot_times, dtype=float)
        self.bounds = bounds
        self.integrator = integrator
        self.n_evals = 0
        self._basis = None

    @property
    def K(self) -> int:
        return self.knot_times.size

    @property
    def d_u(self) -> int:
        return self.ensemble.d_u

    def _clip(self, knots):
        return knots if self.bounds is None else self.bounds.clip(knots)

    def signal(self, knots) -> ControlSignal:
        knots = self._clip(np.asarray(knots, dtype=float))
        if knots.ndim == 3:  # (N, K, d_u) -> (K, N, d_u)
            knots = np.swapaxes(knots, 0, 1)
        return ControlSignal(self.knot_times, knots, "cubic")

    def member_costs(self, knots) -> Array:
        knots = np.asarray(knots, dtype=float)
        if not np.all(np.isfinite(knots)):
            raise ValueError("knots must be finite")
        self.n_evals += 1 if knots.ndim == 2 else knots.shape[0]
        return ensemble_trajectory_costs(self.ensemble, self.cost, self.x0, self.signal(knots), self.t_span,
                                         self.integrator, self.bounds)

    def __call__(self, knots):
        knots = np.asarray(knots, dtype=float)
        c = self.member_costs(knots)
        if knots.ndim == 3 and not np.all(np.isfinite(c)) and knots.shape[0] > 1:
            # one bad sample poisons the shared step control, retry individually
            c = np.stack([self.member_costs(k) for k in knots], axis=1)
        out = np.mean(c, axis=0)
        return float(out) if knots.ndim == 2 else out

    def value_and_grad(self, knots) -> tuple[float, Array]:
        """Adjoint gradient: forward states, backward costates, Simpson projection onto the spline basis."""
        knots = np.asarray(knots, dtype=float)
        ens, cost = self.ensemble, self.cost
        t0, tf = self.t_span
        d = ens.d_x
        self.n_evals += 1
        sig = self.signal(knots)
        lo = -np.inf if self.bounds is None else self.bounds.lower
        hi = np.inf if self.bounds is None else self.bounds.upper

        def fwd_rhs(t, y):
            x = y[..., :d]
            u = np.clip(sig(t), lo, hi)[None]
            return np.concatenate([ens.f(x, u, t), cost.L(x, u)[..., None]], axis=-1)

        y0 = np.zeros((ens.M, d + 1))
        y0[:, :d] = self.x0
        fwd = integrate_adaptive(fwd_rhs, y0, self.t_span, self.integrator, dense_output=True)
        x_tf = fwd.final[:, :d]
        value = float(np.mean(fwd.final[:, d] + cost.phi(x_tf)))

        def bwd_rhs(s, lam):
            t = tf - s
            x = fwd.at(t)[:, :d]
            u = np.clip(sig(t), lo, hi)[None]
            return cost.grad_x_L(x) + ens.vjp_x(x, u, lam, t)

        tq, wq = _simpson_grid(self.knot_times)
        bwd = integrate_adaptive(bwd_rhs, cost.grad_phi(x_tf), (0.0, tf - t0), self.integrator,
                                 dense_times=(tf - tq)[::-1])
        lam_q = bwd.states[::-1]  # (Nq, M, d)
        x_q = np.stack([fwd.at(t)[:, :d] for t in tq])
        raw = np.stack([sig(t) for t in tq])  # (Nq, d_u)
        u_q = np.clip(raw, lo, hi)
        mask = (raw > lo) & (raw < hi)
        gu = ens.vjp_u(np.swapaxes(x_q, 0, 1), u_q[None], np.swapaxes(lam_q, 0, 1))  # (M, Nq, d_u)
        g = (2.0 * u_q @ cost.R + gu.mean(axis=0)) * mask
        if self._basis is None:
            self._basis = ControlSignal(self.knot_times, np.eye(self.K), "cubic").sample(tq)  # (Nq, K)
        grad = np.einsum("q,qk,qj->kj", wq, self._basis, g)
        if self.bounds is not None:
            grad = grad * ((knots >= lo) & (knots <= hi))
        return value, grad

    def gradient(self, knots) -> Array:
        return self.value_and_grad(knots)[1]

    def fd_value_and_grad(self, knots, step: float = 1e-5) -> tuple[float, Array]:
        """Central differences, all 2 K d_u perturbations in one batched call."""
        knots = np.asarray(knots, dtype=float)
        n = knots.size
        E = np.eye(n).reshape(n, *knots.shape) * step
        vals = self(np.concatenate([knots[None], knots[None] + E, knots[None] - E]))
        g = (vals[1:n + 1] - vals[n + 1:]) / (2 * step)
        return float(vals[0]), g.reshape(knots.shape)


def mean_cost_objective(ensemble, cost: QuadraticCost, x0, knots, t_span, bounds: Optional[ControlBounds] = None,
                        knot_times=None, integrator: IntegratorConfig = PLANNING) -> float:
    knots = np.asarray(knots, dtype=float)
    obj = MeanCostObjective(ensemble, cost, x0, t_span, knot_times, bounds, integrator, n_knots=knots.shape[0])
    return obj(knots)


def adjoint_gradient(ensemble, cost: QuadraticCost, x0, knots, t_span, bounds: Optional[ControlBounds] = None,
                     knot_times=None, integrator: IntegratorConfig = PLANNING) -> Array:
    knots = np.asarray(knots, dtype=float)
    if t_span[1] - t_span[0] <= 1e-12:
        return np.zeros_like(knots)
    obj = MeanCostObjective(ensemble, cost, x0, t_span, knot_times, bounds, integrator, n_knots=knots.shape[0])
    return obj.gradient(knots)


# ---------------------------------------------------------------------------
# iCEM
# ---------------------------------------------------------------------------

def colored_samples(rng: np.random.Generator, n: int, K: int, d_u: int, beta: float) -> Array:
    """Gaussian noise with a 1/f^beta spectrum along the knot axis, (n, K, d_u).

    Scaled by the theoretical spectral std, so short sequences are only
    roughly unit variance.
    """
    if K < 2 or beta == 0:
        return rng.standard_normal((n, K, d_u))
    e = colorednoise.powerlaw_psd_gaussian(beta, (n, d_u, K), random_state=rng)
    return np.swapaxes(e, 1, 2)


def _evaluate(objective, pop: Array) -> Array:
    c = np.asarray(objective(pop), dtype=float)
    return np.where(np.isfinite(c), c, np.inf)


def icem_plan(objective, bounds: ControlBounds, K: int, config: IcemConfig = IcemConfig(), seed: int = 0,
              init_mean: Optional[Array] = None, carry: Optional[dict] = None) -> tuple[Array, float]:
    """Improved cross-entropy method over (K, d_u) knots.

    ``carry`` is an optional dict; on return it holds the final elites so a
    caller can shift them into the next MPC step (key "elites").
    """
    rng = np.random.default_rng(seed)
    d_u = bounds.d_u
    lo, hi = bounds.lower, bounds.upper
    width = np.where(np.isfinite(hi - lo), hi - lo, 2.0)
    mean = np.zeros((K, d_u)) if init_mean is None else bounds.clip(np.asarray(init_mean, dtype=float).reshape(K, d_u))
    std0 = 0.5 * width if config.init_std is None else np.full(d_u, config.init_std)
    std = np.broadcast_to(std0, (K, d_u)).astype(float).copy()
    n_el = config.n_elites
    n_keep = int(round(config.keep_elites_frac * n_el))
    elites = None
    if carry is not None and config.shift_elites and carry.get("elites") is not None:
        elites = bounds.clip(np.asarray(carry["elites"], dtype=float))[:n_keep]
    best_x, best_c = mean.copy(), float(_evaluate(objective, mean[None])[0])
    history = [best_c]
    for it in range(config.iterations):
        pop = bounds.clip(mean + std * colored_samples(rng, config.population, K, d_u, config.noise_beta))
        if elites is not None and len(elites):
            pop = np.concatenate([pop, elites[:n_keep]])
        if it == config.iterations - 1:
            pop = np.concatenate([pop, mean[None]])
        c = _evaluate(objective, pop)
        order = np.argsort(c, kind="stable")
        elites = pop[order[:n_el]]
        if c[order[0]] < best_c:
            best_c, best_x = float(c[order[0]]), pop[order[0]].copy()
        mean = config.momentum * mean + (1 - config.momentum) * elites.mean(axis=0)
        std = np.maximum(config.momentum * std + (1 - config.momentum) * elites.std(axis=0), config.min_std)
        history.append(best_c)
    if carry is not None:
        carry["elites"] = elites
        carry["history"] = history
    return bounds.clip(best_x), best_c


# ---------------------------------------------------------------------------
# Gradient planners
# ---------------------------------------------------------------------------

def _value_and_grad(objective, x: Array, config: GradPlanConfig):
    if config.gradient == "finite_difference":
        return objective.fd_value_and_grad(x, config.fd_step)
    return objective.value_and_grad(x)


def adam_plan(objective, bounds: ControlBounds, K: int, config: GradPlanConfig = GradPlanConfig(), seed: int = 0,
              init: Optional[Array] = None) -> tuple[Array, float]:
    """Projected Adam on the knots; returns the best iterate seen."""
    d_u = bounds.d_u
    x = np.zeros((K, d_u)) if init is None else bounds.clip(np.asarray(init, dtype=float).reshape(K, d_u))
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best_c = x.copy(), np.inf
    b1, b2 = config.beta1, config.beta2
    for it in range(1, config.iterations + 1):
        c, g = _value_and_grad(objective, x, config)
        if c < best_c:
            best_c, best_x = c, x.copy()
        if not np.all(np.isfinite(g)) or np.max(np.abs(g)) <= config.gtol:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** it)
        vh = v / (1 - b2 ** it)
        x = bounds.clip(x - config.learning_rate * mh / (np.sqrt(vh) + config.eps))
    else:
        c = float(objective(x))
        if c < best_c:
            best_c, best_x = c, x.copy()
    return best_x, float(best_c)


def bfgs_plan(objective, bounds: ControlBounds, K: int, config: GradPlanConfig = GradPlanConfig(),
              init: Optional[Array] = None) -> tuple[Array, float]:
    """Projected BFGS with Armijo backtracking (quadratic interpolation of the step)."""
    d_u = bounds.d_u
    shape = (K, d_u)
    x = np.zeros(shape) if init is None else bounds.clip(np.asarray(init, dtype=float).reshape(shape))
    x = x.ravel()
    lo = np.broadcast_to(bounds.lower, shape).ravel()
    hi = np.broadcast_to(bounds.upper, shape).ravel()
    n = x.size

    def fg(z):
        c, g = _value_and_grad(objective, z.reshape(shape), config)
        return float(c), np.asarray(g, dtype=float).ravel()

    f, g = fg(x)
    Hinv = np.eye(n)
    scaled = False
    best_x, best_f = x.copy(), f
    c1 = config.armijo
    for it in range(config.iterations):
        pg = x - np.clip(x - g, lo, hi)
        if not np.isfinite(f) or np.max(np.abs(pg)) <= config.gtol:
            break
        # variables pinned at a bound with the gradient pushing outward are frozen this step
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        accepted = False
        for direction in ("newton", "steepest"):
            if direction == "newton":
                p = np.zeros(n)
                Hf = Hinv[np.ix_(free, free)]
                p[free] = -Hf @ g[free]
            else:
                p = -g * free
            alpha = 1.0
            for _ in range(30):
                x_new = np.clip(x + alpha * p, lo, hi)
                dx = x_new - x
                slope = float(g @ dx)
                if slope >= 0 or not np.any(dx):
                    break
                f_new, g_new = fg(x_new)
                if np.isfinite(f_new) and f_new <= f + c1 * slope:
                    accepted = True
                    # one interpolation refinement when the step is clearly mis-scaled
                    curv = f_new - f - slope
                    a_star = -slope / (2.0 * curv) if curv > 0 else 4.0
                    if abs(a_star - 1.0) > 0.05:
                        a_star = min(a_star, 4.0)
                        x2 = np.clip(x + a_star * dx, lo, hi)
                        f2, g2 = fg(x2)
                        if np.isfinite(f2) and f2 < f_new:
                            x_new, f_new, g_new = x2, f2, g2
                    break
                # minimizer of the quadratic through f, slope and f_new, safeguarded
                denom = 2.0 * (f_new - f - slope)
                a_q = -slope * alpha / denom if np.isfinite(f_new) and denom > 0 else 0.5 * alpha
                alpha = float(np.clip(a_q, 0.1 * alpha, 0.5 * alpha))
            if accepted:
                break
            log.debug("bfgs: %s direction failed at iteration %d", direction, it)
        if not accepted:
            break
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-10:
            if not scaled:
                Hinv = np.eye(n) * (sy / float(y @ y))
                scaled = True
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
    return best_x.reshape(shape), float(best_f)
