"""Decoupled actor/worker/learner training for cooperative multi-agent
Q-learning, with native environments and a throughput benchmark harness."""

from .bench import ExperimentConfig, run_experiment, throughput_compare
from .envs import CoopMatrixGameSpec, EnvConfig, EnvSpec, SCENARIOS, optimal_joint_return
from .nets import NetDims
from .runtime import ActorConfig, LearnerConfig, WorkerConfig, greedy_eval

__version__ = "0.1.0"

__all__ = [
    "ActorConfig",
    "CoopMatrixGameSpec",
    "EnvConfig",
    "EnvSpec",
    "ExperimentConfig",
    "LearnerConfig",
    "NetDims",
    "SCENARIOS",
    "WorkerConfig",
    "greedy_eval",
    "optimal_joint_return",
    "run_experiment",
    "throughput_compare",
]
