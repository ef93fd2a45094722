"""Reward-scaling sampling attacks on gradient-based meta reinforcement learning."""
from .attack import AttackConfig, AttackState, SamplingAttack, intermittent_attack, persistent_attack, robust_train
from .env import Nav2DUniform, TabularFixedSet, TrajectoryBatch, rollout_batch, sample_tasks
from .meta import MetaConfig, evaluate, sg_mrl, sg_mrl_two_step
from .policy import PolicyParams, PolicyShape

__version__ = "0.1.0"
