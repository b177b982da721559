"""Dual-role (Observer / Solver) policy optimization with verifiable rewards on a synthetic counting task."""

from .advantage import build_flat_advantages, build_prco_advantages, centered_advantages, zscore_advantages
from .metrics import categorize_error, evaluate, pass_at_k
from .optimize import OptimConfig, apply_update, surrogate_loss
from .policy import FeatureConfig, FeatureMap, InitConfig, PolicyParams, Role, init_params
from .reward import RewardConfig, observer_reward, solver_reward
from .rollout import dynamic_sample, rollout_flat, rollout_prco
from .synthenv import EnvConfig, generate_instance, oracle_answer, verify
from .trainer import TrainConfig, matched_baseline, preset, run_training

__version__ = "0.1.0"
