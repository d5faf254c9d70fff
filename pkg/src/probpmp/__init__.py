"""Probabilistic Pontryagin control: mean-Hamiltonian shooting for learned ensemble dynamics."""
from .integrate import ControlSignal, IntegratorConfig, Trajectory, integrate_adaptive, integrate_rk4_fixed
from .systems import CartPole, Duffing, LinearSystem, ModelEnsemble, SineDemo, VanDerPol, make_system
from .neural import MlpEnsemble, NetConfig, count_params
from .ocp import ControlBounds, QuadraticCost
from .pmp import ShootingProblem, SolverConfig, solve_mean_h, solve_mean_u
from .direct import GradPlanConfig, IcemConfig, adam_plan, bfgs_plan, icem_plan
from .mpc import MpcConfig, Plant, run_mpc
from .training import TrainConfig, fit_ensemble, generate_offline_dataset

__version__ = "0.1.0"
