"""Dataset generation under random excitation and ensemble fitting by short RK4 rollouts."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .integrate import (ControlSignal, DivergenceError, IntegratorConfig, NonConvergenceError, ORACLE,
                        integrate_adaptive, read_table, schroeder_sweep, write_table)
from .neural import MlpEnsemble, NetConfig, init_params

Array = np.ndarray
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrialDataset:
    times: Array  # (T,)
    observations: Array  # (T, d_x)
    control: ControlSignal
    trial: int = 0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.observations, dtype=float)
        if t.ndim != 1 or y.shape[0] != t.size:
            raise ValueError("one observation per time required")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "observations", y)

    @property
    def d_x(self) -> int:
        return self.observations.shape[1]

    @property
    def controls(self) -> Array:
        return self.control.sample(self.times)

    def to_csv(self, path) -> None:
        u = self.controls
        header = ["t"] + [f"y{i + 1}" for i in range(self.d_x)] + [f"u{i + 1}" for i in range(u.shape[1])]
        write_table(path, header, np.column_stack([self.times, self.observations, u]))
        k = self.control
        write_table(Path(path).with_suffix(".control.csv"), ["t"] + [f"u{i + 1}" for i in range(k.d_u)],
                    np.column_stack([k.knot_times, k.knot_values]))

    @classmethod
    def from_csv(cls, path, trial: int = 0, period: Optional[float] = None,
                 interpolation: str = "cubic") -> "TrialDataset":
        header, data = read_table(path)
        d_x = sum(h.startswith("y") for h in header)
        _, kn = read_table(Path(path).with_suffix(".control.csv"))
        control = ControlSignal(kn[:, 0], kn[:, 1:], interpolation, period)
        return cls(data[:, 0], data[:, 1:1 + d_x], control, trial)


@dataclass(frozen=True)
class ExcitationConfig:
    amplitude: float = 1.0
    n_harmonics: int = 8
    period: Optional[float] = None  # defaults to the trial length


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 1e-3
    rollout_len: int = 5
    batch_size: int = 128
    h: Optional[float] = None  # RK4 step; default obs_interval / rollout_len
    weight_decay: float = 0.0
    val_frac: float = 0.1
    patience: int = 100
    max_restarts: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.rollout_len < 1 or self.batch_size < 1:
            raise ValueError("epochs, learning_rate, rollout_len and batch_size must be positive")
        if self.weight_decay < 0 or not 0 <= self.val_frac < 1:
            raise ValueError("invalid weight_decay or val_frac")
        if self.h is not None and self.h <= 0:
            raise ValueError("h must be positive")


def generate_offline_dataset(system, n_trials: int, trial_length: float, obs_interval: float,
                             excitation: ExcitationConfig, init_state_box: Sequence[Sequence[float]],
                             noise_sigma: float, seed: int, integrator: IntegratorConfig = ORACLE,
                             max_retries: int = 5, first_trial: int = 0) -> list[TrialDataset]:
    """Simulate trials of the true system under random Schroeder sweeps and add Gaussian observation noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if n_trials < 1 or trial_length <= 0 or obs_interval <= 0:
        raise ValueError("need n_trials >= 1 and positive durations")
    box = np.asarray(init_state_box, dtype=float)
    if box.shape != (system.d_x, 2) or np.any(box[:, 0] > box[:, 1]):
        raise ValueError("init_state_box must list (low, high) per state dimension")
    n_obs = int(round(trial_length / obs_interval))
    times = obs_interval * np.arange(n_obs + 1)
    period = excitation.period or trial_length
    out = []
    for n in range(first_trial, first_trial + n_trials):
        for retry in range(max_retries + 1):
            rng = np.random.default_rng([seed, n, retry])
            x0 = rng.uniform(box[:, 0], box[:, 1])
            sweep = schroeder_sweep(excitation.amplitude, excitation.n_harmonics, period,
                                    seed=int(rng.integers(2 ** 31)), d_u=system.d_u)
            try:
                tr = integrate_adaptive(lambda t, x: system.f(x, sweep(t), t), x0, (0.0, times[-1]), integrator,
                                        dense_times=times)
                break
            except (DivergenceError, NonConvergenceError) as exc:
                log.warning("trial %d diverged (%s), resampling", n, exc)
        else:
            raise DivergenceError(f"trial {n} diverged after {max_retries} retries", 0.0, x0)
        y = tr.states + noise_sigma * rng.standard_normal(tr.states.shape)
        out.append(TrialDataset(times, y, sweep, n))
    return out


def save_datasets(directory, datasets: Sequence[TrialDataset], manifest: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        ds.to_csv(directory / f"trial_{ds.trial:03d}.csv")
    man = dict(manifest)
    man["trials"] = [int(ds.trial) for ds in datasets]
    man["periods"] = [ds.control.period for ds in datasets]
    man["interpolation"] = [ds.control.interpolation for ds in datasets]
    (directory / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=float))


def load_datasets(directory) -> tuple[list[TrialDataset], dict]:
    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text())
    out = []
    for n, p, interp in zip(man["trials"], man["periods"], man["interpolation"]):
        out.append(TrialDataset.from_csv(directory / f"trial_{n:03d}.csv", n, p, interp))
    return out, man


# ---------------------------------------------------------------------------
# Transitions and RK4 rollouts with reverse-mode gradients
# ---------------------------------------------------------------------------

@dataclass
class Transitions:
    """Consecutive observation pairs with the control sampled at every RK4 stage."""

    x: Array  # (N, d_x)
    target: Array  # (N, d_x)
    u: Array  # (N, n_sub, 3, d_u) control at stage offsets 0, h/2, h of each sub-step
    h: float

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "Transitions":
        return Transitions(self.x[idx], self.target[idx], self.u[idx], self.h)


def make_transitions(datasets: Sequence[TrialDataset], rollout_len: int = 5, h: Optional[float] = None) -> Transitions:
    xs, ys, us = [], [], []
    hs = set()
    for ds in datasets:
        dt = np.diff(ds.times)
        if not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12):
            raise ValueError("observations must be equally spaced")
        step = dt[0] / rollout_len if h is None else h
        n_sub = int(round(dt[0] / step))
        if abs(n_sub * step - dt[0]) > 1e-9 * dt[0]:
            raise ValueError(f"RK4 step {step} does not divide the observation interval {dt[0]}")
        hs.add(round(step, 12))
        offs = (np.arange(n_sub)[:, None] + np.array([0.0, 0.5, 1.0])[None]) * step  # (n_sub, 3)
        t_q = ds.times[:-1, None, None] + offs[None]
        u = np.stack([ds.control(t) for t in t_q.ravel()]).reshape(t_q.shape + (ds.control.d_u,))
        xs.append(ds.observations[:-1])
        ys.append(ds.observations[1:])
        us.append(u)
    if len(hs) != 1:
        raise ValueError("datasets disagree on the RK4 step")
    return Transitions(np.concatenate(xs), np.concatenate(ys), np.concatenate(us), hs.pop())


def _rk4_rollout(ens: MlpEnsemble, x: Array, u: Array, h: float, keep: bool = False):
    """x (M, B, d_x), u (M, B, n_sub, 3, d_u); returns the end state and per-stage caches."""
    net = ens.net
    caches = []
    for s in range(u.shape[2]):
        us = u[:, :, s]
        stages = []
        z_in = x
        ks = []
        for i, (c_in, j) in enumerate(((0.0, 0), (0.5, 1), (0.5, 1), (1.0, 2))):
            if i > 0:
                z_in = x + c_in * h * ks[-1]
            z = np.concatenate([z_in, us[:, :, j]], axis=-1)
            if keep:
                k, cache = net.forward(z, keep=True)
                stages.append(cache)
            else:
                k = net.forward(z)
            ks.append(k)
        x = x + (h / 6.0) * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
        caches.append(stages)
    return x, caches


def _rk4_backward(ens: MlpEnsemble, caches, g: Array, h: float) -> Array:
    """Reverse pass through the stored rollout; returns parameter gradients (M, P)."""
    net = ens.net
    d = ens.d_x
    grad = np.zeros_like(net.theta)
    for stages in reversed(caches):
        gx = g
        dk = [h / 6.0 * g, h / 3.0 * g, h / 3.0 * g, h / 6.0 * g]
        for i in (3, 2, 1, 0):
            gz, gp = net.backward(stages[i], dk[i], want_params=True)
            grad += gp
            gzx = gz[..., :d]
            gx = gx + gzx
            if i > 0:
                dk[i - 1] = dk[i - 1] + (1.0 if i == 3 else 0.5) * h * gzx
        g = gx
    return grad


def rollout_predict(ens: MlpEnsemble, tr: Transitions) -> Array:
    """Predicted next observations for every member, (M, N, d_x)."""
    M = ens.M
    x = np.broadcast_to(tr.x, (M,) + tr.x.shape)
    u = np.broadcast_to(tr.u, (M,) + tr.u.shape)
    return _rk4_rollout(ens, x, u, tr.h)[0]


def rollout_loss(ens: MlpEnsemble, tr: Transitions) -> Array:
    """Mean squared next-observation error per member, (M,)."""
    pred = rollout_predict(ens, tr)
    return np.mean(np.sum((pred - tr.target) ** 2, axis=-1), axis=-1)


def one_step_loss(member, dataset: TrialDataset, h: float) -> float:
    """Mean over transitions of ||RK4 prediction - next observation||^2 using steps of size h."""
    dt = float(dataset.times[1] - dataset.times[0])
    n_sub = int(round(dt / h))
    tr = make_transitions([dataset], n_sub)
    if isinstance(member, MlpEnsemble):
        return float(rollout_loss(member, tr).mean())
    x = tr.x.copy()
    for s in range(n_sub):
        u = tr.u[:, s]
        k1 = member.f(x, u[:, 0])
        k2 = member.f(x + 0.5 * h * k1, u[:, 1])
        k3 = member.f(x + 0.5 * h * k2, u[:, 1])
        k4 = member.f(x + h * k3, u[:, 2])
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return float(np.mean(np.sum((x - tr.target) ** 2, axis=-1)))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass
class FitHistory:
    train: list = field(default_factory=list)  # (epochs, M)
    val: list = field(default_factory=list)
    initial_loss: Optional[Array] = None
    best_epoch: Optional[Array] = None
    restarts: Optional[Array] = None

    def to_dict(self) -> dict:
        return {"train": np.asarray(self.train).tolist(), "val": np.asarray(self.val).tolist(),
                "initial_loss": None if self.initial_loss is None else np.asarray(self.initial_loss).tolist(),
                "best_epoch": None if self.best_epoch is None else np.asarray(self.best_epoch).tolist(),
                "restarts": None if self.restarts is None else np.asarray(self.restarts).tolist()}


def fit_ensemble(datasets: Sequence[TrialDataset], net_config: NetConfig, M: int, config: TrainConfig = TrainConfig(),
                 seed: int = 0, init: Optional[Array] = None, history: Optional[FitHistory] = None) -> MlpEnsemble:
    """Train M members (seeds seed+i) with Adam on RK4 rollout regression; members are batched together.

    Each member draws its own initialization and minibatch order; the 10%
    validation split is shared. The parameters with the best validation loss
    are returned per member.
    """
    if not datasets:
        raise ValueError("no data")
    d_x = datasets[0].d_x
    if net_config.d_out != d_x:
        raise ValueError("network output size must equal the state dimension")
    tr_all = make_transitions(datasets, config.rollout_len, config.h)
    N = len(tr_all)
    split_rng = np.random.default_rng([seed, 7919])
    perm = split_rng.permutation(N)
    n_val = int(round(config.val_frac * N)) if N >= 10 else 0
    val = tr_all.take(perm[:n_val]) if n_val else None
    train = tr_all.take(perm[n_val:])
    n_tr = len(train)

    rngs = [np.random.default_rng([seed + i, 104729]) for i in range(M)]
    theta = np.stack([init_params(net_config, seed + i) for i in range(M)]) if init is None else np.array(init, float)
    lr = np.full(M, config.learning_rate)
    restarts = np.zeros(M, int)
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = np.zeros(M)
    b1, b2, eps = 0.9, 0.999, 1e-8
    B = min(config.batch_size, n_tr)
    n_batches = int(np.ceil(n_tr / B))

    def losses(th, data):
        return rollout_loss(MlpEnsemble(net_config, th, d_x), data)

    hist = history if history is not None else FitHistory()
    hist.initial_loss = losses(theta, train)
    best = theta.copy()
    best_val = np.full(M, np.inf)
    best_epoch = np.zeros(M, int)
    stale = np.zeros(M, int)
    for epoch in range(config.epochs):
        orders = np.stack([r.permutation(n_tr) for r in rngs])
        for b in range(n_batches):
            idx = orders[:, b * B:(b + 1) * B]
            if idx.shape[1] == 0:
                continue
            x = train.x[idx]
            tgt = train.target[idx]
            u = train.u[idx]
            ens = MlpEnsemble(net_config, theta, d_x)
            pred, caches = _rk4_rollout(ens, x, u, train.h, keep=True)
            err = pred - tgt
            g = 2.0 * err / idx.shape[1]
            grad = _rk4_backward(ens, caches, g, train.h)
            if config.weight_decay:
                grad = grad + config.weight_decay * theta
            step += 1
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad * grad
            upd = (m1 / (1 - b1 ** step[:, None])) / (np.sqrt(m2 / (1 - b2 ** step[:, None])) + eps)
            theta = theta - lr[:, None] * upd
            bad = ~np.all(np.isfinite(theta), axis=1)
            if bad.any():
                for i in np.flatnonzero(bad):
                    if restarts[i] >= config.max_restarts:
                        raise FloatingPointError(f"member {i} diverged after {restarts[i]} restarts")
                    restarts[i] += 1
                    lr[i] *= 0.5
                    log.warning("member %d: non-finite parameters, restarting with lr=%g", i, lr[i])
                    theta[i] = init_params(net_config, seed + i + 1000 * restarts[i])
                    m1[i] = m2[i] = 0.0
                    step[i] = 0
                    best_val[i] = np.inf
                    stale[i] = 0
        tl = losses(theta, train)
        vl = losses(theta, val) if val is not None else tl
        hist.train.append(tl)
        hist.val.append(vl)
        improved = np.isfinite(vl) & (vl < best_val)
        best[improved] = theta[improved]
        best_val[improved] = vl[improved]
        best_epoch[improved] = epoch
        stale = np.where(improved, 0, stale + 1)
        if np.all(stale >= config.patience):
            log.info("early stop at epoch %d", epoch)
            break
    hist.best_epoch = best_epoch
    hist.restarts = restarts
    return MlpEnsemble(net_config, best, d_x)


def save_fit(path, ens: MlpEnsemble, seed: int, train_config: TrainConfig, history: Optional[FitHistory] = None,
             extra: Optional[dict] = None) -> None:
    meta = {"train_config": asdict(train_config)}
    if history is not None:
        meta["history"] = history.to_dict()
    if extra:
        meta.update(extra)
    ens.save(path, seed=seed, extra=meta)
