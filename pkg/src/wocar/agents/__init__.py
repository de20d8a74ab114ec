"""Training loops, schedules, replay and environment wrappers."""

from .common import TrainConfig, TrainingAborted, extract_tabular_policy, tabular_report
from .dqn import DQNState, robust_target, vanilla_dqn_train, vanilla_target, wocar_dqn_train
from .ppo import PPOState, vanilla_ppo_train, wocar_ppo_train
from .envs import ENV_NAMES, PointMassEnv, TabularEnv, make_env
from .replay import ReplayBuffer
from .schedules import Schedules

__all__ = [
    "DQNState", "ENV_NAMES", "PPOState", "PointMassEnv", "ReplayBuffer", "Schedules", "TabularEnv", "TrainConfig",
    "TrainingAborted", "extract_tabular_policy", "make_env", "robust_target", "tabular_report",
    "vanilla_ppo_train", "wocar_ppo_train",
    "vanilla_dqn_train", "vanilla_target", "wocar_dqn_train",
]
