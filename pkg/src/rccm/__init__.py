"""Robust control contraction metric tracking with disturbance estimation (RD-CCM)."""
from .controller import (FeasibilityReport, check_feasible_plan, min_norm_control, nominal_ccm_control,
                         robust_ccm_control)
from .dynamics import SystemModel, benchmark_disturbance, quadrotor_model
from .estimator import EebParams, alpha, compute_eeb, compute_phi, max_sampling_period
from .geodesic import GeodesicSolver, GeodesicSolverConfig
from .learner import SnMlp, TrainConfig, train
from .metric import MetricPolynomial, verify_dual_ccm
from .planner import PlannerConfig, TaskSpec, plan_flat
from .sim import ScenarioConfig, TrajectoryLog, run_experiment_matrix, run_scenario

__version__ = "0.1.0"
