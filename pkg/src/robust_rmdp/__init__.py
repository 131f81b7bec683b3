"""Robust offline RL with total-variation uncertainty sets.

Exact robust planning (RQI), offline robust fitted Q-iteration (RFQI) with a
dual-function ERM step, offline dataset tooling, and evaluation/diagnostics
on small benchmark RMDPs.
"""
from ._backend import kernels as _kernels
from .approx import ErmOptions, FeatureMap, LinearDualClass, LinearQClass, erm_dual, least_squares_q
from .benchmarks import make_benchmark
from .core import (
    InvalidModelError,
    Policy,
    TabularRMDP,
    greedy_policy,
    load_rmdp,
    occupancy,
    policy_value_nominal,
    save_rmdp,
    validate,
)
from .data import Dataset, exhaustive_dataset, generate_dataset, load_dataset, save_dataset
from .dual import TVBallSpec, robust_bellman_apply, tv_inner_inf_dual, tv_inner_inf_primal
from .harness import diagnose, evaluate_policy, perturbation_sweep
from .planner import PlanResult, robust_policy_value, rqi
from .rfqi import RFQIConfig, RMDPShape, run_fqi, run_rfqi, theorem1_bound

BACKEND = _kernels.NAME
__version__ = "0.1.0"
