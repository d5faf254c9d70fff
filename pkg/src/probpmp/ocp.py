"""Quadratic costs, Hamiltonians, costate dynamics and pointwise control minimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .integrate import (ControlSignal, DivergenceError, IntegratorConfig, NonConvergenceError, PLANNING,
                        integrate_adaptive)
from .systems import as_ensemble

Array = np.ndarray
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuadraticCost:
    """L(x, u) = (x - x*)^T Q (x - x*) + u^T R u and Phi(x) = (x - x*)^T Q_f (x - x*)."""

    Q: Array
    Qf: Array
    R: Array
    x_star: Array

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        Qf = np.atleast_2d(np.asarray(self.Qf, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        xs = np.asarray(self.x_star, dtype=float).ravel()
        for name, S in (("Q", Q), ("Qf", Qf), ("R", R)):
            if S.shape[0] != S.shape[1] or not np.allclose(S, S.T):
                raise ValueError(f"{name} must be symmetric")
        if Q.shape != Qf.shape or Q.shape[0] != xs.size:
            raise ValueError("Q, Qf and x_star dimensions disagree")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-12 or np.min(np.linalg.eigvalsh(Qf)) < -1e-12:
            raise ValueError("Q and Qf must be positive semi-definite")
        np.linalg.cholesky(R)  # raises LinAlgError unless R is positive definite
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Qf", Qf)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "x_star", xs)

    @classmethod
    def diagonal(cls, q, qf, r, x_star) -> "QuadraticCost":
        """Build from diagonal entries listed in state order (scalars broadcast)."""
        xs = np.asarray(x_star, dtype=float).ravel()
        d = xs.size
        q = np.broadcast_to(np.asarray(q, dtype=float), (d,))
        qf = np.broadcast_to(np.asarray(qf, dtype=float), (d,))
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return cls(np.diag(q), np.diag(qf), np.diag(r), xs)

    @property
    def d_x(self) -> int:
        return self.x_star.size

    @property
    def d_u(self) -> int:
        return self.R.shape[0]

    def scaled(self, terminal: float = 1.0) -> "QuadraticCost":
        return QuadraticCost(self.Q, terminal * self.Qf, self.R, self.x_star)

    def L(self, x, u) -> Array:
        e = np.asarray(x) - self.x_star
        u = np.asarray(u)
        return np.einsum("...i,ij,...j->...", e, self.Q, e) + np.einsum("...i,ij,...j->...", u, self.R, u)

    def grad_x_L(self, x, u=None) -> Array:
        return 2.0 * (np.asarray(x) - self.x_star) @ self.Q

    def grad_u_L(self, x, u) -> Array:
        return 2.0 * np.asarray(u) @ self.R

    def phi(self, x) -> Array:
        e = np.asarray(x) - self.x_star
        return np.einsum("...i,ij,...j->...", e, self.Qf, e)

    def grad_phi(self, x) -> Array:
        return 2.0 * (np.asarray(x) - self.x_star) @ self.Qf


def running_cost(cost: QuadraticCost, x, u) -> Array:
    return cost.L(x, u)


def grad_x_L(cost: QuadraticCost, x, u) -> Array:
    return cost.grad_x_L(x, u)


def grad_u_L(cost: QuadraticCost, x, u) -> Array:
    return cost.grad_u_L(x, u)


def terminal_cost(cost: QuadraticCost, x) -> Array:
    return cost.phi(x)


def grad_terminal(cost: QuadraticCost, x) -> Array:
    return cost.grad_phi(x)


@dataclass(frozen=True)
class ControlBounds:
    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("need lower < upper in every dimension")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, lo: float, hi: float, d_u: int = 1) -> "ControlBounds":
        return cls(np.full(d_u, lo), np.full(d_u, hi))

    @classmethod
    def unbounded(cls, d_u: int = 1) -> "ControlBounds":
        return cls(np.full(d_u, -np.inf), np.full(d_u, np.inf))

    @property
    def d_u(self) -> int:
        return self.lower.size

    @property
    def width(self) -> Array:
        return self.upper - self.lower

    def clip(self, u) -> Array:
        return np.clip(u, self.lower, self.upper)

    def interior(self, u, margin: float = 1e-9) -> Array:
        """True where every component is strictly inside the box."""
        u = np.asarray(u)
        return np.all((u > self.lower + margin) & (u < self.upper - margin), axis=-1)


@dataclass
class HamiltonianContext:
    """Member states and costates (each (M, d_x)) at time t."""

    x: Array
    lam: Array
    t: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if self.x.shape != self.lam.shape:
            raise ValueError("states and costates must have matching shapes")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.lam))):
            raise ValueError("non-finite context")


def hamiltonian(model, cost: QuadraticCost, x, lam, u, t: float = 0.0) -> Array:
    """H = L(x, u) + lam^T f(x, u, t) for a single DynamicsModel."""
    return cost.L(x, u) + np.sum(np.asarray(lam) * model.f(x, u, t), axis=-1)


def mean_hamiltonian(ensemble, cost: QuadraticCost, ctx: HamiltonianContext, u) -> float:
    """Uniform ensemble average of member Hamiltonians at a shared control u."""
    ens = as_ensemble(ensemble)
    if ctx.x.shape[0] != ens.M:
        raise ValueError(f"context has {ctx.x.shape[0]} members, ensemble has {ens.M}")
    u = np.asarray(u, dtype=float).reshape(1, -1)
    f = ens.f(ctx.x, np.broadcast_to(u, (ens.M, u.shape[-1])), ctx.t)
    H = cost.L(ctx.x, u) + np.sum(ctx.lam * f, axis=-1)
    return float(np.mean(H))


def grad_u_mean_hamiltonian(ensemble, cost: QuadraticCost, ctx: HamiltonianContext, u) -> Array:
    ens = as_ensemble(ensemble)
    u = np.asarray(u, dtype=float).reshape(1, -1)
    ub = np.broadcast_to(u, (ens.M, u.shape[-1]))
    return 2.0 * u[0] @ cost.R + np.mean(ens.vjp_u(ctx.x, ub, ctx.lam, ctx.t), axis=0)


def costate_rhs(model, cost: QuadraticCost, x, lam, u, t: float = 0.0) -> Array:
    """lam' = -grad_x H = -(2 Q (x - x*) + jac_x^T lam)."""
    return -(cost.grad_x_L(x, u) + model.vjp_x(x, u, lam, t))


def minimize_hamiltonian_batch(ens, cost: QuadraticCost, x: Array, lam: Array, u0: Array, bounds: ControlBounds,
                               coupled: bool = True, tol: float = 1e-8, max_iter: int = 50, t: float = 0.0) -> Array:
    """Pointwise argmin over u of the (mean) Hamiltonian for a batch of contexts.

    x, lam: (M, B, d_x). With ``coupled`` the control is shared by all
    members, u0 has shape (B, d_u) and the member average is minimized;
    otherwise u0 is (M, B, d_u) and each member is minimized on its own.
    Projected Newton on the gradient 2 R u + mean_i jac_u^T lam_i.
    """
    R2 = 2.0 * cost.R
    d_u = R2.shape[0]
    if ens.control_affine:
        # gradient is affine in u, one Newton step from anywhere is exact
        probe = np.zeros((1,) * (x.ndim - 1) + (d_u,))
        c = ens.vjp_u(x, probe, lam, t)
        if not np.all(np.isfinite(c)):
            bad = np.argwhere(~np.all(np.isfinite(c.reshape(c.shape[0], -1)), axis=1))
            raise FloatingPointError(f"non-finite Hamiltonian gradient (member {int(bad[0, 0])})")
        if coupled:
            c = np.mean(c, axis=0)
        u = -np.linalg.solve(R2, c[..., None])[..., 0] if d_u > 1 else -c / R2[0, 0]
        return bounds.clip(u)
    u = np.array(u0, dtype=float)
    lo, hi = bounds.lower, bounds.upper
    newton_stop = 0.1 * np.sqrt(tol)
    for _ in range(max_iter):
        ub = u[None] if coupled else u
        g, H = ens.grad_u_and_hess(x, ub, lam, t)
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.all(np.isfinite(g.reshape(g.shape[0], -1)), axis=1))
            raise FloatingPointError(f"non-finite Hamiltonian gradient (member {int(bad[0, 0])})")
        if coupled:
            g, H = np.mean(g, axis=0), np.mean(H, axis=0)
        g = g + u @ R2
        H = H + R2
        pg = u - np.clip(u - g, lo, hi)
        if not np.all(np.isfinite(pg)):
            bad = np.argwhere(~np.all(np.isfinite(x), axis=-1))
            member = int(bad[0, 0]) if bad.size else -1
            raise FloatingPointError(f"non-finite Hamiltonian gradient (member {member})")
        if np.max(np.abs(pg)) <= tol:
            break
        if d_u == 1:
            h = H[..., 0, 0]
            pd = h > 1e-12
            h = np.where(pd, h, R2[0, 0])
            step = g / h[..., None]
        else:
            ev = np.linalg.eigvalsh(H)
            pd = ev[..., 0] > 1e-12
            H = np.where(pd[..., None, None], H, R2)
            step = np.linalg.solve(H, g[..., None])[..., 0]
        u = np.clip(u - step, lo, hi)
        # a small true Newton step leaves an O(step^2) gradient; skip the confirming evaluation
        if np.all(pd) and np.max(np.abs(step)) <= newton_stop:
            break
    return u


def minimize_mean_H_over_u(ensemble, cost: QuadraticCost, ctx: HamiltonianContext, u_init, bounds: ControlBounds,
                           tol: float = 1e-8, max_iter: int = 50) -> Array:
    """Minimize the mean Hamiltonian over the control box at one context."""
    ens = as_ensemble(ensemble)
    if ctx.x.shape[0] != ens.M:
        raise ValueError("context member count differs from ensemble size")
    u0 = np.asarray(u_init, dtype=float).reshape(1, -1)
    u = minimize_hamiltonian_batch(ens, cost, ctx.x[:, None], ctx.lam[:, None], u0, bounds, True, tol, max_iter,
                                   ctx.t)
    return u[0]


def _cost_rhs(ens, cost: QuadraticCost, control: ControlSignal, bounds: Optional[ControlBounds] = None):
    d = ens.d_x

    def rhs(t, y):
        x = y[..., :d]
        u = control(t)
        if bounds is not None:
            u = bounds.clip(u)
        dx = ens.f(x, u[None] if u.ndim < x.ndim else u, t)
        return np.concatenate([dx, cost.L(x, u)[..., None]], axis=-1)

    return rhs


def ensemble_trajectory_costs(ensemble, cost: QuadraticCost, x0, control: ControlSignal, t_span,
                              config: IntegratorConfig = PLANNING, bounds: Optional[ControlBounds] = None) -> Array:
    """Per-member cost C_theta(u) under a control signal.

    A batched signal with knot values (K, N, d_u) yields costs of shape (M, N).
    With ``bounds`` the signal is clipped pointwise. Divergent integrations
    give +inf.
    """
    ens = as_ensemble(ensemble)
    x0 = np.asarray(x0, dtype=float)
    batch = control.knot_values.shape[1:-1]
    y0 = np.zeros((ens.M,) + batch + (ens.d_x + 1,))
    y0[..., :ens.d_x] = x0
    try:
        tr = integrate_adaptive(_cost_rhs(ens, cost, control, bounds), y0, t_span, config)
    except (DivergenceError, NonConvergenceError) as exc:
        log.warning("trajectory cost integration failed: %s", exc)
        return np.full((ens.M,) + batch, np.inf)
    yf = tr.final
    out = yf[..., -1] + cost.phi(yf[..., :ens.d_x])
    return np.where(np.isfinite(out), out, np.inf)


def trajectory_cost(model, cost: QuadraticCost, x0, control: ControlSignal, t_span,
                    config: IntegratorConfig = PLANNING, bounds: Optional[ControlBounds] = None) -> float:
    """Integral of L plus terminal cost, with the running cost as an extra ODE coordinate."""
    return float(np.mean(ensemble_trajectory_costs(model, cost, x0, control, t_span, config, bounds)))
