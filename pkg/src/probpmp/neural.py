"""MLP dynamics models and deep ensembles.

Parameters of one network are a flat vector. Layer l stores its weight as
an (n_out, n_in) row-major block followed by its bias (hidden layers only,
unless ``output_bias``). An ensemble stacks M such vectors into (M, P) and
every kernel below works on member-leading arrays of shape (M, N, ...).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .systems import DynamicsModel

Array = np.ndarray


def _tanh(h):
    a = np.tanh(h)
    return a, 1.0 - a * a


def _sigmoid(h):
    a = 0.5 * (1.0 + np.tanh(0.5 * h))
    return a, a * (1.0 - a)


ACTIVATIONS = {"tanh": _tanh, "sigmoid": _sigmoid}


def _second_derivative(name: str, a: Array, da: Array) -> Array:
    if name == "tanh":
        return -2.0 * a * da
    return da * (1.0 - 2.0 * a)


@dataclass(frozen=True)
class NetConfig:
    layer_sizes: tuple = (3, 32, 32, 2)
    activation: str = "tanh"
    output_bias: bool = False

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def for_system(cls, d_x: int, d_u: int, hidden: Sequence[int] = (32, 32), **kw) -> "NetConfig":
        return cls((d_x + d_u, *hidden, d_x), **kw)

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]


def count_params(config: NetConfig) -> int:
    sizes = config.layer_sizes
    n = 0
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        hidden = i < len(sizes) - 2
        n += n_in * n_out + (n_out if hidden or config.output_bias else 0)
    return n


def _layout(config: NetConfig):
    """Slices (w_start, w_end, b_start, b_end, n_in, n_out) per layer."""
    sizes = config.layer_sizes
    out, pos = [], 0
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w0, pos = pos, pos + n_in * n_out
        if i < len(sizes) - 2 or config.output_bias:
            b0, pos = pos, pos + n_out
        else:
            b0 = None
        out.append((w0, b0, n_in, n_out))
    return out


def init_params(config: NetConfig, seed: int) -> Array:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(count_params(config))
    for w0, _, n_in, n_out in _layout(config):
        lim = np.sqrt(6.0 / (n_in + n_out))
        theta[w0:w0 + n_in * n_out] = rng.uniform(-lim, lim, size=n_in * n_out)
    return theta


class _Net:
    """Unpacked views of stacked parameters, shared by all kernels."""

    def __init__(self, config: NetConfig, theta: Array):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[None]
        P = count_params(config)
        if theta.shape[-1] != P:
            raise ValueError(f"expected {P} parameters, got {theta.shape[-1]}")
        self.config = config
        self.theta = theta
        self.M = theta.shape[0]
        self.act = ACTIVATIONS[config.activation]
        self.WT, self.b = [], []
        for w0, b0, n_in, n_out in _layout(config):
            W = theta[:, w0:w0 + n_in * n_out].reshape(self.M, n_out, n_in)
            self.WT.append(W.transpose(0, 2, 1))
            self.b.append(None if b0 is None else theta[:, None, b0:b0 + n_out])

    def forward(self, z: Array, keep: bool = False):
        """z (M, N, n_in) -> out (M, N, n_out) and optionally the layer cache."""
        a = z
        cache = []
        L = len(self.WT)
        for l in range(L - 1):
            h = a @ self.WT[l]
            if self.b[l] is not None:
                h = h + self.b[l]
            a_new, da = self.act(h)
            cache.append((a, a_new, da))
            a = a_new
        out = a @ self.WT[-1]
        if self.b[-1] is not None:
            out = out + self.b[-1]
        if keep:
            cache.append((a, None, None))
            return out, cache
        return out

    def backward(self, cache, g_out: Array, want_params: bool = False):
        """Reverse pass: returns dL/dz and, optionally, per-member parameter grads (M, P)."""
        L = len(self.WT)
        grads = [None] * L
        g = g_out
        for l in range(L - 1, -1, -1):
            a_in = cache[l][0]
            if want_params:
                gW = np.swapaxes(g, 1, 2) @ a_in  # (M, n_out, n_in)
                gb = g.sum(axis=1) if self.b[l] is not None else None
                grads[l] = (gW, gb)
            g = g @ np.swapaxes(self.WT[l], 1, 2)
            if l > 0:
                g = g * cache[l - 1][2]
        if not want_params:
            return g, None
        flat = np.zeros_like(self.theta)
        for (w0, b0, n_in, n_out), (gW, gb) in zip(_layout(self.config), grads):
            flat[:, w0:w0 + n_in * n_out] = gW.reshape(self.M, -1)
            if b0 is not None:
                flat[:, b0:b0 + n_out] = gb
        return g, flat

    def adjoints(self, z: Array, lam: Array):
        """Forward + reverse pass for lam^T f; returns (out, dz, cache, layer adjoints)."""
        out, cache = self.forward(z, keep=True)
        L = len(self.WT)
        gbar = [None] * (L - 1)  # adjoint with respect to each hidden activation
        g = lam
        for l in range(L - 1, -1, -1):
            g = g @ np.swapaxes(self.WT[l], 1, 2)
            if l > 0:
                gbar[l - 1] = g
                g = g * cache[l - 1][2]
        return out, g, cache, gbar

    def hess_input(self, cache, gbar, dims: Sequence[int]) -> Array:
        """Hessian of lam^T f restricted to the given input coordinates, (M, N, k, k)."""
        name = self.config.activation
        k = len(dims)
        N = cache[0][0].shape[1]
        H = np.zeros((self.M, N, k, k))
        # first-order tangents of each hidden pre-activation along e_dim
        tang = [self.WT[0][:, None, d, :] for d in dims]  # (M, 1, n1)
        for l in range(len(gbar)):
            a, da = cache[l][1], cache[l][2]
            d2 = _second_derivative(name, a, da) * gbar[l]
            for i in range(k):
                for j in range(i, k):
                    hij = np.sum(d2 * tang[i] * tang[j], axis=-1)
                    H[:, :, i, j] += hij
                    if j != i:
                        H[:, :, j, i] += hij
            if l + 1 < len(gbar):
                tang = [(da * t) @ self.WT[l + 1] for t in tang]
        return H


class MlpEnsemble:
    """M MLP members sharing one architecture; member axis leads every array."""

    def __init__(self, config: NetConfig, params: Array, d_x: int | None = None):
        self.config = config
        self.net = _Net(config, params)
        self.M = self.net.M
        self.d_x = config.d_out if d_x is None else d_x
        self.d_u = config.d_in - self.d_x
        if self.d_u < 0:
            raise ValueError("input layer smaller than state dimension")
        self.control_affine = False

    @property
    def params(self) -> Array:
        return self.net.theta

    @property
    def members(self) -> list[Array]:
        return [p for p in self.net.theta]

    def member(self, i: int) -> "MlpModel":
        return MlpModel(self.config, self.net.theta[i])

    def subset(self, idx) -> "MlpEnsemble":
        return MlpEnsemble(self.config, self.net.theta[np.atleast_1d(idx)], self.d_x)

    def _inputs(self, x: Array, u: Array):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[0] != self.M or x.shape[-1] != self.d_x:
            raise ValueError(f"state batch {x.shape} does not match ensemble (M={self.M}, d_x={self.d_x})")
        if u.shape[-1] != self.d_u:
            raise ValueError(f"control dimension {u.shape[-1]} != {self.d_u}")
        batch = x.shape[1:-1]
        u = np.broadcast_to(u, (self.M,) + batch + (self.d_u,))
        z = np.concatenate([x, u], axis=-1).reshape(self.M, -1, self.d_x + self.d_u)
        return z, batch

    def f(self, x: Array, u: Array, t: float = 0.0) -> Array:
        z, batch = self._inputs(x, u)
        return self.net.forward(z).reshape((self.M,) + batch + (self.d_x,))

    def vjp(self, x: Array, u: Array, lam: Array, t: float = 0.0):
        """(jac_x^T lam, jac_u^T lam)."""
        z, batch = self._inputs(x, u)
        lam = np.broadcast_to(lam, (self.M,) + batch + (self.d_x,)).reshape(self.M, -1, self.d_x)
        _, g, _, _ = self.net.adjoints(z, lam)
        g = g.reshape((self.M,) + batch + (self.d_x + self.d_u,))
        return g[..., :self.d_x], g[..., self.d_x:]

    def vjp_x(self, x, u, lam, t=0.0):
        return self.vjp(x, u, lam, t)[0]

    def f_and_vjp_x(self, x, u, lam, t=0.0):
        """f(x, u) and jac_x^T lam from one forward/reverse sweep."""
        z, batch = self._inputs(x, u)
        lam = np.broadcast_to(lam, (self.M,) + batch + (self.d_x,)).reshape(self.M, -1, self.d_x)
        out, g, _, _ = self.net.adjoints(z, lam)
        return (out.reshape((self.M,) + batch + (self.d_x,)),
                g.reshape((self.M,) + batch + (self.d_x + self.d_u,))[..., :self.d_x])

    def vjp_u(self, x, u, lam, t=0.0):
        return self.vjp(x, u, lam, t)[1]

    def hess_u(self, x, u, lam, t=0.0):
        z, batch = self._inputs(x, u)
        lam = np.broadcast_to(lam, (self.M,) + batch + (self.d_x,)).reshape(self.M, -1, self.d_x)
        _, _, cache, gbar = self.net.adjoints(z, lam)
        H = self.net.hess_input(cache, gbar, range(self.d_x, self.d_x + self.d_u))
        return H.reshape((self.M,) + batch + (self.d_u, self.d_u))

    def grad_u_and_hess(self, x, u, lam, t=0.0):
        """jac_u^T lam and the u-Hessian of lam^T f in one pass."""
        z, batch = self._inputs(x, u)
        lam = np.broadcast_to(lam, (self.M,) + batch + (self.d_x,)).reshape(self.M, -1, self.d_x)
        _, g, cache, gbar = self.net.adjoints(z, lam)
        H = self.net.hess_input(cache, gbar, range(self.d_x, self.d_x + self.d_u))
        g = g.reshape((self.M,) + batch + (self.d_x + self.d_u,))[..., self.d_x:]
        return g, H.reshape((self.M,) + batch + (self.d_u, self.d_u))

    def jacobian(self, x: Array, u: Array, t: float = 0.0) -> Array:
        """Full input Jacobian (M, ..., d_x, d_x + d_u) by forward-mode propagation."""
        z, batch = self._inputs(x, u)
        n_in = z.shape[-1]
        T = np.broadcast_to(np.eye(n_in), (self.M, z.shape[1], n_in, n_in))  # d a / d z, (.., units, n_in)
        a = z
        net = self.net
        for l in range(len(net.WT) - 1):
            h = a @ net.WT[l]
            if net.b[l] is not None:
                h = h + net.b[l]
            a, da = net.act(h)
            T = da[..., None] * np.einsum("mij,mnjk->mnik", np.swapaxes(net.WT[l], 1, 2), T)
        J = np.einsum("mij,mnjk->mnik", np.swapaxes(net.WT[-1], 1, 2), T)
        return J.reshape((self.M,) + batch + (self.d_x, n_in))

    def jac_x(self, x, u, t=0.0):
        return self.jacobian(x, u, t)[..., :self.d_x]

    def jac_u(self, x, u, t=0.0):
        return self.jacobian(x, u, t)[..., self.d_x:]

    def param_grad(self, x: Array, u: Array, g_out: Array) -> Array:
        """Vector-Jacobian product of the outputs with respect to parameters, (M, P)."""
        z, batch = self._inputs(x, u)
        _, cache = self.net.forward(z, keep=True)
        _, grads = self.net.backward(cache, g_out.reshape(self.M, -1, self.d_x), want_params=True)
        return grads

    def save(self, path, seed: int | None = None, extra: dict | None = None) -> None:
        save_ensemble(path, self, seed=seed, extra=extra)


class MlpModel(DynamicsModel):
    """Single MLP member exposed through the DynamicsModel interface."""

    def __init__(self, config: NetConfig, params: Array, d_x: int | None = None):
        self.ens = MlpEnsemble(config, np.asarray(params, dtype=float)[None], d_x)
        self.d_x, self.d_u = self.ens.d_x, self.ens.d_u
        self.control_affine = False

    @property
    def params(self) -> Array:
        return self.ens.params[0]

    def f(self, x, u, t=0.0):
        return self.ens.f(np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None])[0]

    def jac_x(self, x, u, t=0.0):
        return self.ens.jac_x(np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None])[0]

    def jac_u(self, x, u, t=0.0):
        return self.ens.jac_u(np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None])[0]

    def vjp_x(self, x, u, lam, t=0.0):
        return self.ens.vjp_x(np.asarray(x)[None], np.asarray(u)[None], np.asarray(lam)[None])[0]

    def vjp_u(self, x, u, lam, t=0.0):
        return self.ens.vjp_u(np.asarray(x)[None], np.asarray(u)[None], np.asarray(lam)[None])[0]

    def hess_u(self, x, u, lam, t=0.0):
        return self.ens.hess_u(np.asarray(x)[None], np.asarray(u)[None], np.asarray(lam)[None])[0]


def mlp_forward(config: NetConfig, params: Array, x: Array, u: Array, t: float = 0.0) -> Array:
    return MlpModel(config, params).f(x, u, t)


def mlp_jac_x(config: NetConfig, params: Array, x: Array, u: Array, t: float = 0.0) -> Array:
    return MlpModel(config, params).jac_x(x, u, t)


def mlp_jac_u(config: NetConfig, params: Array, x: Array, u: Array, t: float = 0.0) -> Array:
    return MlpModel(config, params).jac_u(x, u, t)


def mlp_param_grad(config: NetConfig, params: Array, x: Array, u: Array, target: Array) -> Array:
    """Gradient of 0.5 * mean_n ||f(x_n, u_n) - target_n||^2 with respect to the parameters."""
    ens = MlpEnsemble(config, np.asarray(params, dtype=float)[None])
    x = np.atleast_2d(x)[None]
    u = np.atleast_2d(u)[None]
    resid = ens.f(x, u) - np.atleast_2d(target)[None]
    n = resid.shape[1]
    return ens.param_grad(x, u, resid / n)[0]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_ensemble(path, ens: MlpEnsemble, seed: int | None = None, extra: dict | None = None) -> None:
    """Write ``<path>.csv`` (one member per row) and a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path.with_suffix(".csv"), ens.params, delimiter=",", fmt="%.17g")
    meta = {"layer_sizes": list(ens.config.layer_sizes), "activation": ens.config.activation,
            "output_bias": ens.config.output_bias, "members": ens.M, "d_x": ens.d_x,
            "n_params": count_params(ens.config), "seed": seed}
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_ensemble(path) -> MlpEnsemble:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    config = NetConfig(tuple(meta["layer_sizes"]), meta["activation"], meta["output_bias"])
    params = np.loadtxt(path.with_suffix(".csv"), delimiter=",", ndmin=2)
    return MlpEnsemble(config, params, meta.get("d_x"))
