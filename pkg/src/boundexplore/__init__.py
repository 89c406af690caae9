"""Exploration guided by Q-function bounds from bounded-parameter MDPs."""

from .exploration import ExplorationParams, compute_weights, policy_table, sample_action, weight_table
from .interval import (
    Certificate,
    IntervalModelSet,
    QBounds,
    bound_iteration,
    certify_actions,
    inner_optimize_sorted,
    sample_member,
)
from .learner import LearnerConfig, LearnerState, q_update, run_episode, select_action, train
from .mdp import ConvergenceError, MdpEnvironment, TabularMdp, solve_exact
from .regularized import (
    LambdaSchedule,
    ObservedRewards,
    TransitionCounts,
    empirical_kernel,
    inner_optimize_regularized,
    regularized_bound_iteration,
)

__version__ = "0.1.0"
