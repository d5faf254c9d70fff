"""Benchmark dynamics with exact Jacobians.

All models accept batched inputs: x has shape (..., d_x) and u (..., d_u).
They are time-invariant; ``t`` is accepted for interface uniformity.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class DynamicsModel(ABC):
    d_x: int
    d_u: int
    control_affine: bool = True

    @abstractmethod
    def f(self, x: Array, u: Array, t: float = 0.0) -> Array: ...

    @abstractmethod
    def jac_x(self, x: Array, u: Array, t: float = 0.0) -> Array: ...

    @abstractmethod
    def jac_u(self, x: Array, u: Array, t: float = 0.0) -> Array: ...

    def vjp_x(self, x: Array, u: Array, lam: Array, t: float = 0.0) -> Array:
        """jac_x(x, u)^T lam."""
        return np.einsum("...ij,...i->...j", self.jac_x(x, u, t), lam)

    def vjp_u(self, x: Array, u: Array, lam: Array, t: float = 0.0) -> Array:
        """jac_u(x, u)^T lam."""
        return np.einsum("...ij,...i->...j", self.jac_u(x, u, t), lam)

    def hess_u(self, x: Array, u: Array, lam: Array, t: float = 0.0) -> Array:
        """Hessian of lam^T f with respect to u, shape (..., d_u, d_u)."""
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1], np.shape(lam)[:-1])
        return np.zeros(shape + (self.d_u, self.d_u))

    def __call__(self, x, u, t: float = 0.0):
        return self.f(x, u, t)


def _bcast(x: Array, u: Array) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return x, u


# ---------------------------------------------------------------------------
# Van der Pol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VanDerPolParams:
    """x1' = mu (x2 - x1^3/3 + s x1), x2' = -x1 + u with s = linear_sign.

    s = +1 is the Lienard form with an unstable origin and a limit cycle;
    s = -1 makes the origin globally attracting.
    """

    mu: float = 1.5
    linear_sign: float = 1.0

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.linear_sign not in (1.0, -1.0):
            raise ValueError("linear_sign must be +1 or -1")


def vdp_f(x, u, params: VanDerPolParams = VanDerPolParams()) -> Array:
    x, u = _bcast(x, u)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack(np.broadcast_arrays(params.mu * (x2 - x1 ** 3 / 3.0 + params.linear_sign * x1), -x1 + u[..., 0]), axis=-1)


class VanDerPol(DynamicsModel):
    d_x, d_u = 2, 1

    def __init__(self, params: VanDerPolParams = VanDerPolParams()):
        self.params = params

    def f(self, x, u, t=0.0):
        return vdp_f(x, u, self.params)

    def jac_x(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        mu = self.params.mu
        x1 = np.broadcast_to(x[..., 0], np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))
        J = np.zeros(x1.shape + (2, 2))
        J[..., 0, 0] = mu * (self.params.linear_sign - x1 ** 2)
        J[..., 0, 1] = mu
        J[..., 1, 0] = -1.0
        return J

    def jac_u(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        J = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (2, 1))
        J[..., 1, 0] = 1.0
        return J

    def vjp_x(self, x, u, lam, t=0.0):
        mu = self.params.mu
        x1 = x[..., 0]
        l1, l2 = lam[..., 0], lam[..., 1]
        return np.stack(np.broadcast_arrays(mu * (self.params.linear_sign - x1 * x1) * l1 - l2, mu * l1), axis=-1)

    def vjp_u(self, x, u, lam, t=0.0):
        return np.broadcast_to(lam[..., 1:2], np.broadcast_shapes(np.shape(u)[:-1], lam.shape[:-1]) + (1,))


# ---------------------------------------------------------------------------
# Cart pole, state (x, theta, xdot, thetadot); theta = pi is upright
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CartPoleParams:
    l: float = 1.0  # pole half-length
    m: float = 1.0  # pole mass
    Mc: float = 1.0  # cart mass
    g: float = 9.81

    def __post_init__(self):
        if min(self.l, self.m, self.Mc) <= 0:
            raise ValueError("lengths and masses must be positive")


def cartpole_f(x, u, params: CartPoleParams = CartPoleParams()) -> Array:
    x, u = _bcast(x, u)
    l, m, Mc, g = params.l, params.m, params.Mc, params.g
    th, xd, w = x[..., 1], x[..., 2], x[..., 3]
    s, c = np.sin(th), np.cos(th)
    uu = u[..., 0]
    den = Mc + m * (1.0 - c * c)
    xdd = (l * m * s * w * w + uu + m * g * c * s) / den
    thdd = -(l * m * c * s * w * w + uu * c + (Mc + m) * g * s) / (l * den)
    return np.stack(np.broadcast_arrays(xd, w, xdd, thdd), axis=-1)


class CartPole(DynamicsModel):
    d_x, d_u = 4, 1

    def __init__(self, params: CartPoleParams = CartPoleParams()):
        self.params = params

    def f(self, x, u, t=0.0):
        return cartpole_f(x, u, self.params)

    def _partials(self, x, u):
        p = self.params
        l, m, Mc, g = p.l, p.m, p.Mc, p.g
        th, w = x[..., 1], x[..., 3]
        uu = u[..., 0]
        s, c = np.sin(th), np.cos(th)
        D = Mc + m * s * s
        dD = 2.0 * m * s * c
        N1 = l * m * s * w * w + uu + m * g * c * s
        N2 = l * m * c * s * w * w + uu * c + (Mc + m) * g * s
        dN1_th = l * m * c * w * w + m * g * (c * c - s * s)
        dN2_th = l * m * (c * c - s * s) * w * w - uu * s + (Mc + m) * g * c
        a_th = (dN1_th * D - N1 * dD) / (D * D)
        a_w = 2.0 * l * m * s * w / D
        b_th = -(dN2_th * D - N2 * dD) / (l * D * D)
        b_w = -2.0 * l * m * c * s * w / (l * D)
        a_u = 1.0 / D
        b_u = -c / (l * D)
        return a_th, a_w, b_th, b_w, a_u, b_u

    def jac_x(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        a_th, a_w, b_th, b_w, _, _ = np.broadcast_arrays(*self._partials(x, u))
        J = np.zeros(a_th.shape + (4, 4))
        J[..., 0, 2] = 1.0
        J[..., 1, 3] = 1.0
        J[..., 2, 1] = a_th
        J[..., 2, 3] = a_w
        J[..., 3, 1] = b_th
        J[..., 3, 3] = b_w
        return J

    def jac_u(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        *_, a_u, b_u = np.broadcast_arrays(*self._partials(x, u))
        J = np.zeros(a_u.shape + (4, 1))
        J[..., 2, 0] = a_u
        J[..., 3, 0] = b_u
        return J

    def vjp_x(self, x, u, lam, t=0.0):
        a_th, a_w, b_th, b_w, _, _ = self._partials(x, u)
        l0, l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2], lam[..., 3]
        z = 0.0 * (l0 + a_th)
        return np.stack(np.broadcast_arrays(z, a_th * l2 + b_th * l3, l0 + z, l1 + a_w * l2 + b_w * l3), axis=-1)

    def vjp_u(self, x, u, lam, t=0.0):
        *_, a_u, b_u = self._partials(x, u)
        return (a_u * lam[..., 2] + b_u * lam[..., 3])[..., None]


# ---------------------------------------------------------------------------
# Duffing oscillator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DuffingParams:
    alpha: float = -1.0
    beta: float = 2.0
    delta: float = 0.2
    gamma: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def duffing_f(x, u, params: DuffingParams = DuffingParams()) -> Array:
    x, u = _bcast(x, u)
    p = params
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack(np.broadcast_arrays(x2, -p.delta * x2 - p.alpha * x1 - p.beta * x1 ** 3 + p.gamma * u[..., 0]),
                    axis=-1)


class Duffing(DynamicsModel):
    d_x, d_u = 2, 1

    def __init__(self, params: DuffingParams = DuffingParams()):
        self.params = params

    def f(self, x, u, t=0.0):
        return duffing_f(x, u, self.params)

    def jac_x(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        p = self.params
        x1 = np.broadcast_to(x[..., 0], np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))
        J = np.zeros(x1.shape + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -p.alpha - 3.0 * p.beta * x1 ** 2
        J[..., 1, 1] = -p.delta
        return J

    def jac_u(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        J = np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (2, 1))
        J[..., 1, 0] = self.params.gamma
        return J

    def vjp_x(self, x, u, lam, t=0.0):
        p = self.params
        x1 = x[..., 0]
        l1, l2 = lam[..., 0], lam[..., 1]
        return np.stack(np.broadcast_arrays((-p.alpha - 3.0 * p.beta * x1 * x1) * l2, l1 - p.delta * l2), axis=-1)

    def vjp_u(self, x, u, lam, t=0.0):
        return self.params.gamma * np.broadcast_to(
            lam[..., 1:2], np.broadcast_shapes(np.shape(u)[:-1], lam.shape[:-1]) + (1,))


# ---------------------------------------------------------------------------
# Scalar demo f = theta sin(x) + u
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SineDemoParams:
    theta: float = 1.0


def sine_demo_f(x, u, params: SineDemoParams = SineDemoParams()) -> Array:
    x, u = _bcast(x, u)
    return params.theta * np.sin(x) + u


class SineDemo(DynamicsModel):
    d_x, d_u = 1, 1

    def __init__(self, params: SineDemoParams = SineDemoParams()):
        self.params = params

    def f(self, x, u, t=0.0):
        return sine_demo_f(x, u, self.params)

    def jac_x(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        return np.broadcast_to(self.params.theta * np.cos(x), np.broadcast_shapes(x.shape, u.shape))[..., None]

    def jac_u(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        return np.ones(np.broadcast_shapes(x.shape, u.shape) + (1,))

    def vjp_x(self, x, u, lam, t=0.0):
        return self.params.theta * np.cos(x) * lam

    def vjp_u(self, x, u, lam, t=0.0):
        return np.broadcast_to(lam, np.broadcast_shapes(np.shape(u), lam.shape))


# ---------------------------------------------------------------------------
# Linear system x' = A x + B u
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearSystem(DynamicsModel):
    A: Array = field(default_factory=lambda: np.array([[0.0, 1.0], [0.0, 0.0]]))
    B: Array = field(default_factory=lambda: np.array([[0.0], [1.0]]))

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d_x(self):
        return self.A.shape[0]

    @property
    def d_u(self):
        return self.B.shape[1]

    def f(self, x, u, t=0.0):
        x, u = _bcast(x, u)
        return x @ self.A.T + u @ self.B.T

    def jac_x(self, x, u, t=0.0):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.broadcast_to(self.A, shape + self.A.shape).copy()

    def jac_u(self, x, u, t=0.0):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.broadcast_to(self.B, shape + self.B.shape).copy()

    def vjp_x(self, x, u, lam, t=0.0):
        return lam @ self.A

    def vjp_u(self, x, u, lam, t=0.0):
        return np.broadcast_to(lam @ self.B, np.broadcast_shapes(np.shape(u)[:-1], lam.shape[:-1]) + (self.d_u,))


SYSTEMS = {
    "vdp": (VanDerPol, VanDerPolParams),
    "cartpole": (CartPole, CartPoleParams),
    "duffing": (Duffing, DuffingParams),
    "sine_demo": (SineDemo, SineDemoParams),
}


def make_system(name: str, **params) -> DynamicsModel:
    """Build a benchmark system by name ("vdp", "cartpole", "duffing", "sine_demo", "linear")."""
    if name == "linear":
        return LinearSystem(**params)
    try:
        cls, pcls = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}") from None
    return cls(pcls(**params))


class ModelEnsemble:
    """Uniform mixture over a list of DynamicsModel members.

    Arrays are member-leading: x has shape (M, ..., d_x); u broadcasts
    against (M, ..., d_u), so a shared control can be passed with a leading 1.
    """

    def __init__(self, models):
        models = list(models)
        if not models:
            raise ValueError("ensemble needs at least one member")
        d = {(m.d_x, m.d_u) for m in models}
        if len(d) != 1:
            raise ValueError("ensemble members must share dimensions")
        self.models = models
        self.M = len(models)
        self.d_x, self.d_u = d.pop()
        self.control_affine = all(m.control_affine for m in models)

    def _map(self, fn, *args):
        if self.M == 1:
            return getattr(self.models[0], fn)(*(a[0] for a in args))[None]
        return np.stack([getattr(m, fn)(*(a[i] if a.shape[0] > 1 else a[0] for a in args))
                         for i, m in enumerate(self.models)])

    def f(self, x, u, t=0.0):
        return self._map("f", np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def jac_x(self, x, u, t=0.0):
        return self._map("jac_x", np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def jac_u(self, x, u, t=0.0):
        return self._map("jac_u", np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def vjp_x(self, x, u, lam, t=0.0):
        return self._map("vjp_x", np.asarray(x, dtype=float), np.asarray(u, dtype=float), np.asarray(lam))

    def vjp_u(self, x, u, lam, t=0.0):
        return self._map("vjp_u", np.asarray(x, dtype=float), np.asarray(u, dtype=float), np.asarray(lam))

    def hess_u(self, x, u, lam, t=0.0):
        return self._map("hess_u", np.asarray(x, dtype=float), np.asarray(u, dtype=float), np.asarray(lam))

    def grad_u_and_hess(self, x, u, lam, t=0.0):
        return self.vjp_u(x, u, lam, t), self.hess_u(x, u, lam, t)

    def f_and_vjp_x(self, x, u, lam, t=0.0):
        return self.f(x, u, t), self.vjp_x(x, u, lam, t)

    def member(self, i: int) -> DynamicsModel:
        return self.models[i]

    def subset(self, idx) -> "ModelEnsemble":
        return ModelEnsemble([self.models[i] for i in np.atleast_1d(idx)])


def as_ensemble(model):
    """Accept an ensemble, a single DynamicsModel, or a list of models."""
    if hasattr(model, "M") and hasattr(model, "vjp_x"):
        return model
    if isinstance(model, DynamicsModel):
        return ModelEnsemble([model])
    return ModelEnsemble(model)
