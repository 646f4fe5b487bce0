"""GRPO and FRPO on exactly enumerable tabular policies."""

from .env import (CompositeReward, Group, PromptDist, RewardModel, TableReward, TabularPolicy,
                  TargetMatchReward, Trajectory, VocabSpec, enumerate_trajectories, exact_kl,
                  sample_group, token_averaged_kl)
from .estimators import ClipSpec, RiskSpec
from .objectives import ObjectiveConfig
from .trainer import TrainConfig, TrainLog, entropy, train

__all__ = [
    "ClipSpec", "CompositeReward", "Group", "ObjectiveConfig", "PromptDist", "RewardModel", "RiskSpec",
    "TableReward", "TabularPolicy", "TargetMatchReward", "TrainConfig", "TrainLog", "Trajectory",
    "VocabSpec", "entropy", "enumerate_trajectories", "exact_kl", "sample_group", "token_averaged_kl",
    "train",
]
