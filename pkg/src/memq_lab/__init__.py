"""Multi-environment ensemble Q-learning with coverage-based environment selection."""

__version__ = "0.1.0"

from .mdp import Mdp, average_policy_error, policy_from_q, value_iteration
from .graphs import GraphSpec, generate, random_mdp
from .envs import EnvironmentFamily, build_family, sample_and_estimate
from .qlearning import LearnerConfig, MemberPool, Schedules, run_neql, run_single_env
from .selection import ccq, coverage_select, exhaustive_select, partial_order_select

__all__ = [
    "Mdp", "average_policy_error", "policy_from_q", "value_iteration",
    "GraphSpec", "generate", "random_mdp",
    "EnvironmentFamily", "build_family", "sample_and_estimate",
    "LearnerConfig", "MemberPool", "Schedules", "run_neql", "run_single_env",
    "ccq", "coverage_select", "exhaustive_select", "partial_order_select",
]
