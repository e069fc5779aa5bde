"""Feedback-controlled collective flashing ratchet: simulator, handcrafted
policies, from-scratch PPO with tiny autograd networks, and a benchmark harness."""

__version__ = "0.1.0"

from .ratchet import (RatchetParams, SystemState, DelayedEnv, BatchedEnv,
                      potential, force, critical_points, featurize, step,
                      delayed_step, delay_steps)
from .baselines import (periodic_policy, mean_force, greedy_policy,
                        threshold_policy, ThresholdState, MndParams, mnd_policy,
                        displacement_to_minimum, optimize_mnd_x0)
from .networks import (ArchConfig, PolicyOutput, policy_output, sample_action,
                       deterministic_action, build_network, Agent,
                       save_checkpoint, load_checkpoint)
from .ppo import PpoConfig, EnvFactory, collect, estimated_return, td_residuals, \
    gae, clipped_objective, kld_estimate, train, default_m_b
from .evaluation import EvalReport, EvalBudget, evaluate, sweep, best_of_seeds, \
    boundary_grid, time_trace

__all__ = [
    "RatchetParams", "SystemState", "DelayedEnv", "BatchedEnv",
    "potential", "force", "critical_points", "featurize", "step",
    "delayed_step", "delay_steps",
    "periodic_policy", "mean_force", "greedy_policy", "threshold_policy",
    "ThresholdState", "MndParams", "mnd_policy", "displacement_to_minimum",
    "optimize_mnd_x0",
    "ArchConfig", "PolicyOutput", "policy_output", "sample_action",
    "deterministic_action", "build_network", "Agent", "save_checkpoint",
    "load_checkpoint",
    "PpoConfig", "EnvFactory", "collect", "estimated_return", "td_residuals",
    "gae", "clipped_objective", "kld_estimate", "train", "default_m_b",
    "EvalReport", "EvalBudget", "evaluate", "sweep", "best_of_seeds",
    "boundary_grid", "time_trace",
]
