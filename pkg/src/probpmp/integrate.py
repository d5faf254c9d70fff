"""ODE integration and continuous-time control signals.

The adaptive integrator is the Dormand-Prince 5(4) pair with FSAL and its
4th-order continuous extension. States may be arrays of any shape; the
error norm is the max over all entries, so a batch of perturbed copies
integrated together shares one step sequence.
"""
from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline, PPoly

Array = np.ndarray
Rhs = Callable[[float, Array], Array]


class DivergenceError(FloatingPointError):
    """Raised when an integration produces non-finite values."""

    def __init__(self, message: str, t: float, state: Array):
        super().__init__(message)
        self.t = t
        self.state = state


class NonConvergenceError(RuntimeError):
    """Raised when the step budget is exhausted before reaching the end time."""

    def __init__(self, message: str, t: float, state: Array):
        super().__init__(message)
        self.t = t
        self.state = state


# ---------------------------------------------------------------------------
# Control signals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlSignal:
    """Knot-based control function.

    knot_values has shape (K, d_u) or (K, *batch, d_u) for a population of
    signals sharing the same knot times. Outside the knot range the value is
    clamped to the boundary knot, unless ``period`` is set, in which case the
    signal is extended periodically (and the spline uses periodic end
    conditions).
    """

    knot_times: Array
    knot_values: Array
    interpolation: str = "cubic"
    period: Optional[float] = None
    _coef: Array = field(init=False, repr=False, compare=False)
    _tlist: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.array(self.knot_times, dtype=float).ravel()
        y = np.array(self.knot_values, dtype=float)
        if t.size == 0:
            raise ValueError("control signal needs at least one knot")
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != t.size:
            raise ValueError(f"{t.size} knot times but {y.shape[0]} knot values")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("knot values must be finite")
        if self.interpolation not in ("cubic", "zero_order_hold"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.period is not None:
            if t.size < 2 or not np.isclose(t[-1] - t[0], self.period):
                raise ValueError("periodic signal must span exactly one period")
            y[-1] = y[0]
        t.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "knot_times", t)
        object.__setattr__(self, "knot_values", y)
        object.__setattr__(self, "_tlist", t.tolist())
        object.__setattr__(self, "_coef", _spline_coefficients(t, y, self.interpolation, self.period))

    @property
    def d_u(self) -> int:
        return self.knot_values.shape[-1]

    @property
    def t0(self) -> float:
        return self._tlist[0]

    @property
    def tf(self) -> float:
        return self._tlist[-1]

    def _locate(self, t: float) -> tuple[int, float]:
        tl = self._tlist
        if self.period is not None:
            t = tl[0] + (t - tl[0]) % self.period
        if t <= tl[0]:
            return 0, 0.0
        if t >= tl[-1]:
            return len(tl) - 1, 0.0
        i = bisect.bisect_right(tl, t) - 1
        return i, t - tl[i]

    def __call__(self, t: float) -> Array:
        i, dt = self._locate(float(t))
        if dt == 0.0:
            return self.knot_values[i]
        c = self._coef[:, i]
        if self.interpolation == "zero_order_hold":
            return c[3]
        return ((c[0] * dt + c[1]) * dt + c[2]) * dt + c[3]

    def sample(self, times: Sequence[float]) -> Array:
        return np.stack([self(t) for t in times])

    def derivative(self, t: float) -> Array:
        i, dt = self._locate(float(t))
        if i == len(self._tlist) - 1:
            i, dt = i - 1, self._tlist[-1] - self._tlist[-2]
        c = self._coef[:, i]
        return (3.0 * c[0] * dt + 2.0 * c[1]) * dt + c[2]

    def basis_weights(self, t: float) -> Array:
        """Weights w_j(t) with u(t) = sum_j w_j(t) * knot_values[j] (K,)."""
        K = len(self._tlist)
        coef = _basis_coefficients(self.knot_times, self.interpolation, self.period)
        i, dt = self._locate(float(t))
        if dt == 0.0:
            w = np.zeros(K)
            w[i] = 1.0
            return w
        c = coef[:, i]
        return ((c[0] * dt + c[1]) * dt + c[2]) * dt + c[3]

    def with_values(self, knot_values: Array) -> "ControlSignal":
        return ControlSignal(self.knot_times, knot_values, self.interpolation, self.period)


def _spline_coefficients(t: Array, y: Array, interpolation: str, period: Optional[float]) -> Array:
    K = t.size
    if K == 1:
        c = np.zeros((4, 1) + y.shape[1:])
        c[3, 0] = y[0]
        return c
    if interpolation == "zero_order_hold":
        c = np.zeros((4, K - 1) + y.shape[1:])
        c[3] = y[:-1]
        return c
    bc = "periodic" if period is not None else "natural"
    if K == 2 and bc == "periodic":
        bc = "natural"
    return CubicSpline(t, y, axis=0, bc_type=bc).c


_BASIS_CACHE: dict = {}


def _basis_coefficients(t: Array, interpolation: str, period: Optional[float]) -> Array:
    key = (t.tobytes(), interpolation, period)
    coef = _BASIS_CACHE.get(key)
    if coef is None:
        eye = np.eye(t.size)
        if period is not None:
            eye[0, -1] = 1.0  # last knot is tied to the first
            eye[-1, -1] = 0.0
        coef = _spline_coefficients(t, eye, interpolation, period)
        if len(_BASIS_CACHE) > 64:
            _BASIS_CACHE.clear()
        _BASIS_CACHE[key] = coef
    return coef


def eval_control(signal: ControlSignal, t: float) -> Array:
    """Evaluate a control signal at time t (clamped outside the knot range)."""
    return signal(t)


def signal_abs_max(signal: ControlSignal) -> float:
    """Exact maximum of |u(t)| over the knot range for a single signal."""
    y = signal.knot_values
    best = float(np.max(np.abs(y)))
    if signal.interpolation != "cubic" or signal.knot_times.size < 3:
        return best
    for j in range(y.shape[-1]):
        pp = PPoly(signal._coef[..., j], signal.knot_times)
        roots = pp.derivative().roots(extrapolate=False)
        if roots.size:
            best = max(best, float(np.max(np.abs(pp(roots)))))
    return best


def schroeder_sweep(amplitude: float, n_harmonics: int = 8, period: float = 10.0, seed: int = 0,
                    d_u: int = 1, knots_per_period: Optional[int] = None) -> ControlSignal:
    """Random periodic multi-sine with Schroeder phases, scaled to max |u| = amplitude.

    Each harmonic k gets phase -pi k (k-1) / K; the seed draws per-harmonic
    amplitude weights and a random time shift of the whole sweep.
    """
    if n_harmonics < 1:
        raise ValueError("n_harmonics must be >= 1")
    if period <= 0:
        raise ValueError("period must be positive")
    rng = np.random.default_rng(seed)
    K = n_harmonics
    n_knots = knots_per_period or max(200, 40 * K)
    t = np.linspace(0.0, period, n_knots + 1)
    k = np.arange(1, K + 1)
    phases = -np.pi * k * (k - 1) / K
    values = np.empty((t.size, d_u))
    for j in range(d_u):
        weights = rng.uniform(0.5, 1.0, size=K)
        offset = rng.uniform(0.0, 2.0 * np.pi)
        arg = 2.0 * np.pi * np.outer(t, k) / period + phases + offset * k
        values[:, j] = np.cos(arg) @ weights
    for j in range(d_u):
        col = ControlSignal(t, values[:, j:j + 1], "cubic", period=period)
        values[:, j] *= amplitude / signal_abs_max(col)
    return ControlSignal(t, values, "cubic", period=period)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    times: Array
    states: Array
    dense: Optional["DenseOutput"] = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("one state per time point required")

    @property
    def final(self) -> Array:
        return self.states[-1]

    def at(self, t: float) -> Array:
        if self.dense is None:
            raise ValueError("trajectory was integrated without dense output")
        return self.dense(t)

    def to_csv(self, path) -> None:
        flat = self.states.reshape(self.states.shape[0], -1)
        header = ["t"] + [f"x{i + 1}" for i in range(flat.shape[1])]
        write_table(path, header, np.column_stack([self.times, flat]))

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        _, data = read_table(path)
        return cls(data[:, 0], data[:, 1:])


def write_table(path, header: Sequence[str], rows: Array) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.atleast_2d(rows):
            w.writerow([repr(float(v)) for v in row])
    tmp.replace(path)


def read_table(path) -> tuple[list[str], Array]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r if row], dtype=float)
    return header, data.reshape(-1, len(header))


# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    h_init: float = 1e-2
    h_max: float = np.inf
    max_steps: int = 100_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if not (0 < self.h_init <= self.h_max):
            raise ValueError("need 0 < h_init <= h_max")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


PLANNING = IntegratorConfig()
ORACLE = IntegratorConfig(rtol=1e-8, atol=1e-10, h_init=1e-3)

# Dormand-Prince 5(4)
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# continuous extension: y(t + s h) = y + h * sum_i k_i * (P[i] @ [s, s^2, s^3, s^4])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY, MIN_FACTOR, MAX_FACTOR = 0.9, 0.2, 5.0


class DenseOutput:
    """Piecewise quartic interpolant built from accepted DOPRI5 steps."""

    def __init__(self):
        self.t_starts: list[float] = []
        self.pieces: list[tuple[float, float, Array, Array]] = []

    def add(self, t: float, h: float, y: Array, Q: Array) -> None:
        self.t_starts.append(t)
        self.pieces.append((t, h, y, Q))

    def __call__(self, t: float) -> Array:
        i = max(0, min(len(self.pieces) - 1, bisect.bisect_right(self.t_starts, t) - 1))
        t0, h, y, Q = self.pieces[i]
        s = min(max((t - t0) / h, 0.0), 1.0)
        return y + h * (Q @ np.array([s, s * s, s ** 3, s ** 4])).reshape(y.shape)


def _check_finite(x: Array, t: float, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what} at t={t:.6g}", t, x)


def integrate_adaptive(rhs: Rhs, x0, t_span: Sequence[float], config: IntegratorConfig = PLANNING,
                       dense_times: Optional[Sequence[float]] = None, dense_output: bool = False) -> Trajectory:
    """Integrate x' = rhs(t, x) over t_span with DOPRI5(4).

    Returns the states at ``dense_times`` if given, otherwise at the accepted
    step times. With ``dense_output`` the returned trajectory can be queried
    anywhere in the span via ``Trajectory.at``.
    """
    t0, tf = float(t_span[0]), float(t_span[1])
    if not tf > t0:
        raise ValueError(f"need tf > t0, got [{t0}, {tf}]")
    x = np.array(x0, dtype=float)
    shape = x.shape
    atol, rtol = config.atol, config.rtol
    h = min(config.h_init, config.h_max, tf - t0)
    t = t0

    want = None if dense_times is None else np.asarray(dense_times, dtype=float)
    out_t: list[float] = []
    out_x: list[Array] = []
    wi = 0
    if want is None:
        out_t.append(t0)
        out_x.append(x.copy())
    else:
        if want.size and (want[0] < t0 - 1e-12 or want[-1] > tf + 1e-12):
            raise ValueError("dense_times must lie inside t_span")
        while wi < want.size and want[wi] <= t0:
            out_t.append(want[wi])
            out_x.append(x.copy())
            wi += 1
    dense = DenseOutput() if dense_output else None

    k1 = np.asarray(rhs(t, x), dtype=float)
    _check_finite(k1, t, "rhs output")
    steps = 0
    span = tf - t0
    while t < tf:
        if steps >= config.max_steps:
            raise NonConvergenceError(f"step budget {config.max_steps} exhausted at t={t:.6g}", t, x)
        steps += 1
        last = t + h >= tf - 1e-12 * span
        if last:
            h = tf - t
        ks = [k1]
        for i in range(1, 6):
            a = _A[i]
            dx = a[0] * ks[0]
            for j in range(1, i):
                if a[j] != 0.0:
                    dx = dx + a[j] * ks[j]
            ks.append(np.asarray(rhs(t + _C[i] * h, x + h * dx), dtype=float))
        dx = _B[0] * ks[0] + _B[2] * ks[2] + _B[3] * ks[3] + _B[4] * ks[4] + _B[5] * ks[5]
        x_new = x + h * dx
        k7 = np.asarray(rhs(t + h, x_new), dtype=float)
        ks.append(k7)
        err = _E[0] * ks[0] + _E[2] * ks[2] + _E[3] * ks[3] + _E[4] * ks[4] + _E[5] * ks[5] + _E[6] * k7
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = float(np.max(np.abs(h * err) / scale)) if x.size else 0.0
        if not np.isfinite(err_norm):
            if h < 1e-12 * max(1.0, abs(t)):
                raise DivergenceError(f"non-finite state at t={t:.6g}", t, x)
            h *= MIN_FACTOR
            continue
        if err_norm <= 1.0:
            if want is not None or dense is not None:
                K = np.stack([k.reshape(-1) for k in ks], axis=1)
                Q = K @ _P
                if dense is not None:
                    dense.add(t, h, x, Q)
                t_next = tf if last else t + h
                while want is not None and wi < want.size and want[wi] <= t_next + 1e-12 * span:
                    s = (want[wi] - t) / h
                    out_t.append(want[wi])
                    out_x.append(x + h * (Q @ np.array([s, s * s, s ** 3, s ** 4])).reshape(shape))
                    wi += 1
            t = tf if last else t + h
            x = x_new
            k1 = k7
            if want is None:
                out_t.append(t)
                out_x.append(x)
            factor = MAX_FACTOR if err_norm == 0.0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_norm ** -0.2))
            h = min(h * factor, config.h_max)
        else:
            h *= max(MIN_FACTOR, SAFETY * err_norm ** -0.2)
            if h < 1e-14 * max(1.0, abs(t)):
                raise NonConvergenceError(f"step size underflow at t={t:.6g}", t, x)
    if want is not None:
        while wi < want.size:  # times equal to tf within rounding
            out_t.append(want[wi])
            out_x.append(x.copy())
            wi += 1
    return Trajectory(np.array(out_t), np.stack(out_x), dense)


def integrate_rk4_fixed(rhs: Rhs, x0, t_span: Sequence[float], h: float) -> Trajectory:
    """Classical RK4 with a constant step h that must divide the span."""
    t0, tf = float(t_span[0]), float(t_span[1])
    if h <= 0:
        raise ValueError("h must be positive")
    n = int(round((tf - t0) / h))
    if n < 1 or abs(n * h - (tf - t0)) > 1e-9 * max(1.0, abs(tf - t0)):
        raise ValueError(f"step {h} does not divide span [{t0}, {tf}]")
    x = np.array(x0, dtype=float)
    times = t0 + h * np.arange(n + 1)
    states = np.empty((n + 1,) + x.shape)
    states[0] = x
    for i in range(n):
        t = times[i]
        k1 = rhs(t, x)
        k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = rhs(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(x, times[i + 1], "state")
        states[i + 1] = x
    return Trajectory(times, states)
