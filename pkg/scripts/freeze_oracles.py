"""Recompute the frozen reference numbers used in tests/ from independent code paths.

Nothing here imports the package: each oracle is a plain scalar loop or a
scipy routine, so a regression in the package cannot leak into its own
reference values. Run it and compare against tests/oracles.py.
"""
import math

import numpy as np
from scipy.integrate import solve_ivp


def rk4(f, x, t0, t1, h):
    n = int(round((t1 - t0) / h))
    t = t0
    for _ in range(n):
        k1 = f(t, x)
        k2 = f(t + h / 2, [a + h / 2 * b for a, b in zip(x, k1)])
        k3 = f(t + h / 2, [a + h / 2 * b for a, b in zip(x, k2)])
        k4 = f(t + h, [a + h * b for a, b in zip(x, k3)])
        x = [a + h / 6 * (b + 2 * c + 2 * d + e) for a, b, c, d, e in zip(x, k1, k2, k3, k4)]
        t += h
    return x


def vdp(t, x, mu=1.5):
    return [mu * (x[1] - x[0] ** 3 / 3 + x[0]), -x[0]]


def riccati_cost(x0, tf=2.0, h=1e-4):
    """Double integrator, Q=I, R=1, Qf=I: integrate P backward in s = tf - t, cost = x0' P(0) x0."""
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])

    def dP(s, p):
        P = np.array(p).reshape(2, 2)
        return list((A.T @ P + P @ A - P @ B @ B.T @ P + np.eye(2)).ravel())

    P0 = rk4(dP, list(np.eye(2).ravel()), 0.0, tf, h)
    P0 = np.array(P0).reshape(2, 2)
    x0 = np.asarray(x0)
    return float(x0 @ P0 @ x0)


def riccati_closed_loop_cost(x0, tf=2.0):
    """Same cost by simulating the Riccati feedback with scipy at tight tolerance."""
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    sol = solve_ivp(lambda s, p: (A.T @ p.reshape(2, 2) + p.reshape(2, 2) @ A
                                  - p.reshape(2, 2) @ B @ B.T @ p.reshape(2, 2) + np.eye(2)).ravel(),
                    (0, tf), np.eye(2).ravel(), method="DOP853", rtol=1e-12, atol=1e-14, dense_output=True)

    def rhs(t, y):
        P = sol.sol(tf - t).reshape(2, 2)
        x = y[:2]
        u = -(B.T @ P @ x)
        return np.concatenate([A @ x + B @ u, [x @ x + u @ u]])

    out = solve_ivp(rhs, (0, tf), np.concatenate([x0, [0.0]]), method="DOP853", rtol=1e-12, atol=1e-14)
    xf = out.y[:2, -1]
    return float(out.y[2, -1] + xf @ xf)


if __name__ == "__main__":
    print("VDP_RK4_TERMINAL =", rk4(vdp, [1.0, 1.0], 0.0, 10.0, 1e-4))
    print("LQR_RICCATI_COST =", riccati_cost([1.0, 0.5]))
    print("LQR_CLOSED_LOOP_COST =", riccati_closed_loop_cost(np.array([1.0, 0.5])))
    print("EXP_DECAY =", math.exp(-1.0))
