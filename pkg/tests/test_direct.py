import math

import numpy as np
import pytest

from probpmp.direct import (GradPlanConfig, IcemConfig, MeanCostObjective, adam_plan, adjoint_gradient, bfgs_plan,
                            colored_samples, icem_plan, mean_cost_objective)
from probpmp.integrate import IntegratorConfig
from probpmp.ocp import ControlBounds, QuadraticCost, ensemble_trajectory_costs, trajectory_cost
from probpmp.pmp import ShootingProblem, SolverConfig, solve_mean_h
from probpmp.systems import CartPole, ModelEnsemble, VanDerPol, VanDerPolParams

VDP_COST = QuadraticCost.diagonal([1, 1], [1, 1], [0.5], [0, 0])
CP_COST = QuadraticCost.diagonal([1, 1, 1, 1], [1, 5, 1, 1], [0.01], [0, math.pi, 0, 0])
BOX = ControlBounds.box(-2, 2)
TIGHT = IntegratorConfig(rtol=1e-10, atol=1e-12)


class Quadratic:
    """||knots - c||^2 with an exact gradient, same interface as MeanCostObjective."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        r = np.sum((k - self.c) ** 2, axis=(-2, -1))
        return float(r) if k.ndim == 2 else r

    def value_and_grad(self, k):
        return self(k), 2 * (np.asarray(k) - self.c)


class Rosenbrock:
    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        a, b = k[..., 0, 0], k[..., 1, 0]
        v = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        return float(v) if k.ndim == 2 else v

    def value_and_grad(self, k):
        a, b = k[0, 0], k[1, 0]
        g = np.array([[-2 * (1 - a) - 400 * a * (b - a * a)], [200 * (b - a * a)]])
        return self(k), g


def test_mean_cost_identities():
    v = VanDerPol()
    t = np.linspace(0, 2, 11)
    knots = 0.5 * np.cos(3 * t)[:, None]
    one = mean_cost_objective(v, VDP_COST, [1, 1], knots, (0, 2), BOX, t, TIGHT)
    three = mean_cost_objective(ModelEnsemble([v] * 3), VDP_COST, [1, 1], knots, (0, 2), BOX, t, TIGHT)
    assert three == pytest.approx(one, rel=1e-12)
    assert mean_cost_objective(v, VDP_COST, [0, 0], np.zeros((11, 1)), (0, 2)) == 0.0
    ens = ModelEnsemble([VanDerPol(VanDerPolParams(m)) for m in (1.0, 1.5, 2.5)])
    obj = MeanCostObjective(ens, VDP_COST, [1, 1], (0, 2), t, BOX, TIGHT)
    members = ensemble_trajectory_costs(ens, VDP_COST, [1, 1], obj.signal(knots), (0, 2), TIGHT, BOX)
    assert obj(knots) == pytest.approx(np.mean(members), rel=1e-12)
    # separate integrations choose their own steps, so agreement is at integrator accuracy
    each = [trajectory_cost(m, VDP_COST, [1, 1], obj.signal(knots), (0, 2), TIGHT) for m in ens.models]
    assert obj(knots) == pytest.approx(np.mean(each), rel=1e-8)


def test_population_evaluation_matches_single():
    v = VanDerPol()
    t = np.linspace(0, 1, 6)
    obj = MeanCostObjective(v, VDP_COST, [1, 1], (0, 1), t, BOX, TIGHT)
    pop = np.random.default_rng(0).uniform(-2, 2, (5, 6, 1))
    batch = obj(pop)
    for i in range(5):
        assert batch[i] == pytest.approx(obj(pop[i]), rel=1e-8)


@pytest.mark.parametrize("system,cost,x0", [
    (VanDerPol(), VDP_COST, [1.0, 1.0]),
    (CartPole(), CP_COST, [0.0, 0.3, 0.0, 0.0]),
])
def test_adjoint_gradient_matches_central_differences(system, cost, x0):
    rng = np.random.default_rng(17)
    t = np.linspace(0, 1.5, 16)
    lim = 2.0 if system.d_x == 2 else 10.0
    bounds = ControlBounds.box(-lim, lim)
    obj = MeanCostObjective(system, cost, x0, (0, 1.5), t, bounds, TIGHT)
    for _ in range(10):
        k = rng.uniform(-0.8 * lim, 0.8 * lim, (16, 1))
        _, g = obj.value_and_grad(k)
        _, fd = obj.fd_value_and_grad(k, 1e-5)
        assert np.max(np.abs(g - fd)) <= 1e-3 * np.max(np.abs(fd))


def test_adjoint_gradient_ensemble_and_zero_horizon():
    ens = ModelEnsemble([VanDerPol(VanDerPolParams(m)) for m in (1.0, 2.0)])
    t = np.linspace(0, 1, 11)
    k = 0.3 * np.ones((11, 1))
    g = adjoint_gradient(ens, VDP_COST, [1, 1], k, (0, 1), BOX, t, TIGHT)
    obj = MeanCostObjective(ens, VDP_COST, [1, 1], (0, 1), t, BOX, TIGHT)
    fd = obj.fd_value_and_grad(k)[1]
    assert np.max(np.abs(g - fd)) <= 1e-3 * np.max(np.abs(fd))
    np.testing.assert_array_equal(adjoint_gradient(ens, VDP_COST, [1, 1], k[:2], (0.5, 0.5)), 0)


def test_adjoint_gradient_small_at_pmp_solution():
    pb = ShootingProblem(VanDerPol(), VDP_COST, [0.3, -0.3], (0, 2), 2, BOX, TIGHT, SolverConfig(max_iter=40, tol=1e-8),
                         dt=0.02)
    sol = solve_mean_h(pb)
    assert sol.report.converged
    k = sol.control.knot_values
    assert np.all(BOX.interior(k))
    g = adjoint_gradient(pb.ensemble, VDP_COST, pb.x0, k, pb.t_span, BOX, sol.control.knot_times, TIGHT)
    assert np.max(np.abs(g)) <= 1e-4


def test_colored_noise_statistics():
    rng = np.random.default_rng(0)
    e = colored_samples(rng, 2000, 32, 1, 2.0)
    assert e.shape == (2000, 32, 1)
    assert np.all(np.isfinite(e)) and 0.5 < e.std() < 2.0
    # strong positive correlation between neighbouring knots for beta = 2
    assert np.corrcoef(e[:, 10, 0], e[:, 11, 0])[0, 1] > 0.8
    w = colored_samples(rng, 2000, 32, 1, 0.0)
    assert abs(np.corrcoef(w[:, 10, 0], w[:, 11, 0])[0, 1]) < 0.1


def test_icem_recovers_quadratic_minimum():
    c = np.array([[0.5], [-1.0], [1.2], [0.0], [-0.3]])
    cfg = IcemConfig(population=64, iterations=30, min_std=1e-3)
    carry = {}
    k, best = icem_plan(Quadratic(c), BOX, 5, cfg, seed=1, carry=carry)
    assert np.max(np.abs(k - c)) <= 10 * cfg.min_std
    h = carry["history"]
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_icem_reproducible_and_bounded():
    obj = Quadratic(np.full((6, 1), 3.0))  # optimum outside the box
    a = icem_plan(obj, BOX, 6, IcemConfig(iterations=5), seed=4)
    b = icem_plan(obj, BOX, 6, IcemConfig(iterations=5), seed=4)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]
    assert np.all(a[0] <= 2.0) and np.all(a[0] >= -2.0)


def test_icem_config_validation():
    with pytest.raises(ValueError):
        IcemConfig(elite_frac=1.0)
    with pytest.raises(ValueError):
        IcemConfig(population=3)
    with pytest.raises(ValueError):
        IcemConfig(init_std=0.0)


def test_adam_converges_on_quadratic():
    c = np.array([[0.5], [-1.0], [1.2]])
    k, best = adam_plan(Quadratic(c), BOX, 3, GradPlanConfig(iterations=200, learning_rate=0.05))
    assert np.max(np.abs(k - c)) <= 1e-3


def test_adam_returns_init_when_stationary():
    c = np.array([[0.5], [-1.0]])
    k, best = adam_plan(Quadratic(c), BOX, 2, GradPlanConfig(iterations=10), init=c)
    np.testing.assert_array_equal(k, c)
    assert best == 0.0


def test_bfgs_rosenbrock_and_quadratic():
    box = ControlBounds.box(-5, 5)
    k, f = bfgs_plan(Rosenbrock(), box, 2, GradPlanConfig(iterations=200, gtol=1e-10), init=[[-1.2], [1.0]])
    g = Rosenbrock().value_and_grad(k)[1]
    assert np.max(np.abs(g)) <= 1e-6
    np.testing.assert_allclose(k[:, 0], [1, 1], atol=1e-5)
    c = np.array([[0.5], [-1.0], [1.2], [0.1]])
    k, f = bfgs_plan(Quadratic(c), box, 4, GradPlanConfig(iterations=4 + 5, gtol=1e-12))
    assert np.max(np.abs(k - c)) <= 1e-6


@pytest.mark.parametrize("planner", ["icem", "adam", "bfgs"])
def test_planners_respect_bounds_on_vdp(planner):
    t = np.linspace(0, 1, 11)
    obj = MeanCostObjective(VanDerPol(), QuadraticCost.diagonal([20, 20], [20, 20], [0.01], [0, 0]), [2, 2], (0, 1),
                            t, BOX)
    start = obj(np.zeros((11, 1)))
    if planner == "icem":
        k, c = icem_plan(obj, BOX, 11, IcemConfig(iterations=4), seed=0)
    elif planner == "adam":
        k, c = adam_plan(obj, BOX, 11, GradPlanConfig(iterations=20, learning_rate=0.5))
    else:
        k, c = bfgs_plan(obj, BOX, 11, GradPlanConfig(iterations=10))
    assert np.all(k >= -2) and np.all(k <= 2)
    assert np.any(np.abs(k) == 2.0)  # strong weights push against the box
    assert c < start
    # population costs come from one batched integration with shared steps
    assert obj(k) == pytest.approx(c, rel=1e-4)


def test_finite_difference_gradient_mode():
    t = np.linspace(0, 1, 6)
    obj = MeanCostObjective(VanDerPol(), VDP_COST, [1, 1], (0, 1), t, BOX)
    cfg = GradPlanConfig(iterations=5, gradient="finite_difference")
    k1, c1 = adam_plan(obj, BOX, 6, cfg)
    k2, c2 = adam_plan(obj, BOX, 6, GradPlanConfig(iterations=5))
    np.testing.assert_allclose(k1, k2, atol=1e-4)
    with pytest.raises(ValueError):
        GradPlanConfig(gradient="magic")
