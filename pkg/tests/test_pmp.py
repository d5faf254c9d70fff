import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import LQR_CLOSED_LOOP_COST, LQR_RICCATI_COST, LQR_X0
from probpmp.integrate import ControlSignal, IntegratorConfig
from probpmp.mpc import MpcConfig, Plant, run_mpc
from probpmp.neural import MlpEnsemble, NetConfig, init_params
from probpmp.ocp import (ControlBounds, HamiltonianContext, QuadraticCost, grad_u_mean_hamiltonian,
                         trajectory_cost)
from probpmp.pmp import (ShootingProblem, ShootingVars, SolverConfig, shooting_residual, solve_mean_h, solve_mean_u,
                         warm_start_from_trajectory, warm_start_shift)
from probpmp.systems import LinearSystem, ModelEnsemble, SineDemo, SineDemoParams, VanDerPol, VanDerPolParams

TIGHT = IntegratorConfig(rtol=1e-9, atol=1e-11)
VDP_COST = QuadraticCost.diagonal([1, 1], [1, 1], [0.5], [0, 0])
BOX = ControlBounds.box(-2, 2)


def double_integrator():
    return LinearSystem(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]))


def lqr_problem(S=4, integrator=TIGHT, dt=0.01):
    c = QuadraticCost.diagonal([1, 1], [1, 1], [1.0], [0, 0])
    return ShootingProblem(double_integrator(), c, LQR_X0, (0.0, 2.0), S, ControlBounds.unbounded(), integrator,
                           SolverConfig(max_iter=30, tol=1e-9), dt)


def test_oracles_agree():
    assert abs(LQR_RICCATI_COST - LQR_CLOSED_LOOP_COST) / LQR_RICCATI_COST < 1e-9


@pytest.mark.parametrize("S", [1, 4])
def test_lqr_matches_riccati(S):
    pb = lqr_problem(S)
    sol = solve_mean_h(pb)
    assert sol.report.converged
    assert abs(sol.report.cost_estimate - LQR_RICCATI_COST) / LQR_RICCATI_COST < 1e-6
    # replay the returned knot control on the plant
    replay = trajectory_cost(pb.ensemble, pb.cost, LQR_X0, sol.control, pb.t_span, TIGHT)
    assert abs(replay - LQR_RICCATI_COST) / LQR_RICCATI_COST < 1e-3


def test_variable_count_and_residual_shapes():
    ens = ModelEnsemble([VanDerPol(VanDerPolParams(m)) for m in (1.0, 1.5, 2.0)])
    pb = ShootingProblem(ens, VDP_COST, [1, 1], (0, 1), 4, BOX)
    v = pb.zeros()
    assert v.shape == (3, 4, 2) and v.size == 3 * 4 * 2
    r, ctrl, traj = shooting_residual(pb, v)
    assert r.shape == (24,)
    assert isinstance(ctrl, ControlSignal)
    with pytest.raises(ValueError):
        shooting_residual(pb, ShootingVars(np.zeros((3, 3, 2))))


def test_single_segment_residual_is_transversality():
    pb = ShootingProblem(VanDerPol(), VDP_COST, [1, 1], (0, 1), 1, BOX, TIGHT)
    lam0 = np.array([[[0.3, -0.2]]])
    r, _, traj = shooting_residual(pb, ShootingVars(lam0))
    x_T, lam_T = traj.x[-1, 0], traj.lam[-1, 0]
    np.testing.assert_allclose(r, lam_T - VDP_COST.grad_phi(x_T), atol=1e-12)


def test_zero_dynamics_residual_blockwise():
    zero = LinearSystem(np.zeros((2, 2)), np.zeros((2, 1)))
    c = QuadraticCost(np.zeros((2, 2)), np.diag([1.0, 3.0]), np.eye(1), np.array([0.5, -0.5]))
    x0 = np.array([1.0, 2.0])
    pb = ShootingProblem(ModelEnsemble([zero, zero]), c, x0, (0, 2), 3, BOX)
    lam = np.random.default_rng(0).normal(size=(2, 3, 2))
    r, _, _ = shooting_residual(pb, ShootingVars(lam))
    r = r.reshape(2, 3, 2)
    np.testing.assert_allclose(r[:, :2], lam[:, :2] - lam[:, 1:], atol=1e-12)
    np.testing.assert_allclose(r[:, 2], lam[:, 2] - c.grad_phi(x0), atol=1e-12)


def mlp_ensemble(M=3, seed=0):
    cfg = NetConfig((3, 16, 16, 2))
    return MlpEnsemble(cfg, np.stack([0.5 * init_params(cfg, seed + i) for i in range(M)]))


@pytest.fixture(scope="module")
def mlp_solution():
    ens = mlp_ensemble()
    pb = ShootingProblem(ens, VDP_COST, [1.0, 0.5], (0, 1.5), 3, BOX, TIGHT, SolverConfig(max_iter=40, tol=1e-8))
    return pb, solve_mean_h(pb, record_times=np.linspace(0, 1.5, 301))


def test_converged_solution_residual_and_transversality(mlp_solution):
    pb, sol = mlp_solution
    assert sol.report.converged
    r, _, traj = shooting_residual(pb, sol.vars)
    assert np.max(np.abs(r)) <= 1e-6
    for i in range(pb.M):
        assert np.max(np.abs(traj.lam[-1, i] - pb.cost.grad_phi(traj.x[-1, i]))) <= 1e-5


def test_stationarity_at_interior_times(mlp_solution):
    pb, sol = mlp_solution
    traj = sol.trajectories
    inside = np.flatnonzero(BOX.interior(traj.u, 1e-6))
    assert inside.size >= 20
    pick = inside[np.linspace(0, inside.size - 1, 20).astype(int)]
    for k in pick:
        ctx = HamiltonianContext(traj.x[k], traj.lam[k], traj.times[k])
        assert np.linalg.norm(grad_u_mean_hamiltonian(pb.ensemble, pb.cost, ctx, traj.u[k])) <= 1e-5


def test_state_continuity_across_segments(mlp_solution):
    pb, sol = mlp_solution
    eps = 1e-9
    probe = np.sort(np.concatenate([pb.boundaries[1:-1] - eps, pb.boundaries[1:-1] + eps]))
    _, _, traj = shooting_residual(pb, sol.vars, record_times=probe)
    idx = np.searchsorted(traj.times, probe)
    x = traj.x[idx]
    assert np.max(np.abs(x[1::2] - x[0::2])) <= 1e-8


def test_mean_hamiltonian_constant_on_vdp():
    pb = ShootingProblem(VanDerPol(), VDP_COST, [1, 1], (0, 2), 4, BOX, TIGHT, SolverConfig(max_iter=40, tol=1e-7))
    sol = solve_mean_h(pb, record_times=np.linspace(0, 2, 201))
    assert sol.report.converged
    H = sol.trajectories.mean_hamiltonian(pb.ensemble, pb.cost)
    assert np.max(np.abs(H - H[0])) <= 1e-2 * (1 + abs(H[0]))


def sine_ensemble():
    thetas = 1.0 + 0.3 * np.random.default_rng(42).standard_normal(5)
    return ModelEnsemble([SineDemo(SineDemoParams(t)) for t in thetas])


def test_mean_hamiltonian_constant_on_sine_demo():
    c = QuadraticCost.diagonal([1], [1], [1], [0])
    pb = ShootingProblem(sine_ensemble(), c, [1.0], (0, 2), 2, ControlBounds.box(-10, 10), TIGHT,
                         SolverConfig(max_iter=40, tol=1e-7))
    sol = solve_mean_h(pb, record_times=np.linspace(0, 2, 201))
    assert sol.report.converged
    H = sol.trajectories.mean_hamiltonian(pb.ensemble, pb.cost)
    assert np.max(np.abs(H - H[0])) <= 1e-2 * (1 + abs(H[0]))


def test_single_member_mean_h_equals_mean_u():
    pb = ShootingProblem(VanDerPol(), VDP_COST, [1, 1], (0, 2), 4, BOX, TIGHT, SolverConfig(max_iter=40, tol=1e-7))
    a, b = solve_mean_h(pb), solve_mean_u(pb)
    assert a.report.converged and b.report.converged
    np.testing.assert_allclose(a.control.knot_values, b.control.knot_values, atol=1e-9, rtol=0)


def test_identical_members_mean_u_matches_mean_h():
    ens = ModelEnsemble([VanDerPol()] * 3)
    pb = ShootingProblem(ens, VDP_COST, [1, 1], (0, 2), 2, BOX, TIGHT, SolverConfig(max_iter=40, tol=1e-7))
    a, b = solve_mean_h(pb), solve_mean_u(pb)
    np.testing.assert_allclose(a.control.knot_values, b.control.knot_values, atol=1e-6)


def test_mean_u_symmetric_members_average_to_zero():
    up = LinearSystem(np.zeros((1, 1)), np.array([[1.0]]))
    down = LinearSystem(np.zeros((1, 1)), np.array([[-1.0]]))
    c = QuadraticCost.diagonal([50], [50], [0.01], [0])
    pb = ShootingProblem(ModelEnsemble([up, down]), c, [3.0], (0, 1), 2, ControlBounds.box(-1, 1), TIGHT)
    sol = solve_mean_u(pb)
    mc = sol.member_controls
    np.testing.assert_array_equal(mc[:, 0, 0], -1.0)
    np.testing.assert_array_equal(mc[:, 1, 0], 1.0)
    np.testing.assert_array_equal(sol.control.knot_values, 0.0)


def test_nonconvergence_returns_best_iterate():
    pb = ShootingProblem(VanDerPol(), VDP_COST, [2, 2], (0, 3), 2, BOX, solver=SolverConfig(max_iter=1, tol=1e-12))
    sol = solve_mean_h(pb)
    assert not sol.report.converged
    r0 = np.max(np.abs(shooting_residual(pb, pb.zeros())[0]))
    assert sol.report.residual_norm <= r0
    assert sol.report.iterations <= 1
    rep = sol.report.to_json()
    assert '"converged": false' in rep


def test_mean_u_flags_failed_members():
    ens = ModelEnsemble([VanDerPol(), VanDerPol(VanDerPolParams(3.0))])
    pb = ShootingProblem(ens, VDP_COST, [2, 2], (0, 3), 1, BOX, solver=SolverConfig(max_iter=1, tol=1e-12))
    sol = solve_mean_u(pb)
    assert not sol.report.converged
    assert set(sol.report.failed_members) <= {0, 1} and sol.report.failed_members


def test_warm_start_shift_rules():
    pb = ShootingProblem(VanDerPol(), VDP_COST, [1, 1], (0, 2), 4, BOX)
    lam = np.arange(8.0).reshape(1, 4, 2)
    v = ShootingVars(lam)
    np.testing.assert_array_equal(warm_start_shift(v, 0.0, pb).lam, lam)
    out = warm_start_shift(v, 0.5, pb).lam
    np.testing.assert_array_equal(out[:, :3], lam[:, 1:])
    np.testing.assert_array_equal(out[:, 3], lam[:, 3])


@settings(max_examples=20)
@given(st.floats(0.0, 3.0), st.integers(1, 5))
def test_warm_start_shift_finite_and_shaped(shift, S):
    pb = ShootingProblem(VanDerPol(), VDP_COST, [1, 1], (0, 2), S, BOX)
    lam = np.random.default_rng(S).normal(size=(1, S, 2))
    out = warm_start_shift(ShootingVars(lam), shift, pb).lam
    assert out.shape == lam.shape
    # interpolation never leaves the range of the old guesses
    assert np.all(out <= lam.max(axis=1, keepdims=True) + 1e-12)
    assert np.all(out >= lam.min(axis=1, keepdims=True) - 1e-12)


def test_warm_start_from_trajectory():
    ens = ModelEnsemble([VanDerPol(), VanDerPol(VanDerPolParams(1.5))])
    pb = ShootingProblem(ens, VDP_COST, [1, 1], (0, 2), 4, BOX, TIGHT, SolverConfig(max_iter=40, tol=1e-8), 0.05)
    sol = solve_mean_h(pb)
    # the same window is recovered exactly
    np.testing.assert_allclose(warm_start_from_trajectory(sol.trajectories, pb).lam, sol.vars.lam, atol=1e-12)
    # on a shifted window started from the predicted state, only the new tail is off
    k = 2
    x1 = sol.trajectories.x[k, 0]
    pb2 = ShootingProblem(VanDerPol(), VDP_COST, x1, (0.1, 2.1), 4, BOX, TIGHT, SolverConfig(), 0.05)
    with pytest.raises(ValueError):
        warm_start_from_trajectory(sol.trajectories, pb2)
    pb2 = ShootingProblem(ens, VDP_COST, x1, (0.1, 2.1), 4, BOX, TIGHT, SolverConfig(), 0.05)
    near = shooting_residual(pb2, warm_start_from_trajectory(sol.trajectories, pb2))[0].reshape(2, 4, 2)
    shifted = shooting_residual(pb2, warm_start_shift(sol.vars, 0.1, pb, pb2))[0].reshape(2, 4, 2)
    assert np.abs(near).max() < np.abs(shifted).max()


def test_warm_start_saves_iterations():
    v = VanDerPol()
    its = {}
    for warm in (True, False):
        cfg = MpcConfig(3.0, 0.05, 50, "pmp_mean_h", warm_start=warm, segments=4, lm_tol=1e-6)
        res = run_mpc("pmp_mean_h", v, Plant(v, 0.0), VDP_COST, [1, 1], 1.05, cfg, BOX)
        its[warm] = [s["iterations"] for s in res.step_info[1:]]
    assert len(its[True]) == 20
    assert np.median(its[True]) < np.median(its[False])
