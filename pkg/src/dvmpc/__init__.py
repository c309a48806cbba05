"""Value-function MPC actor-critic with path-integral verification tools."""

from .critic import Critic, CriticConfig, ReplayBuffer, bellman_target
from .dynamics import (ControlAffineModel, EnvironmentSpec, Trajectory, TransitionTuple, path_cost, rollout,
                       rollout_batch, simulate, step_deterministic, step_stochastic, transitions)
from .envs import make_environment
from .lq_oracle import LqProblem, RiccatiSolution, solve_riccati
from .mpc import MpcConfig, MpcPolicy, MpcSolution, ValueCostModel, policy_step, solve, solve_batch
from .value_net import ValueNet

__all__ = [
    "Critic", "CriticConfig", "ReplayBuffer", "bellman_target",
    "ControlAffineModel", "EnvironmentSpec", "Trajectory", "TransitionTuple", "path_cost", "rollout",
    "rollout_batch", "simulate", "step_deterministic", "step_stochastic", "transitions",
    "make_environment", "LqProblem", "RiccatiSolution", "solve_riccati",
    "MpcConfig", "MpcPolicy", "MpcSolution", "ValueCostModel", "policy_step", "solve", "solve_batch",
    "ValueNet",
]
