"""Lyapunov-shaped rewards for queue-stable reinforcement learning."""
from .errors import ConfigError, ContractViolation, TrainingError
from .queues import RewardShaper, ShaperKind, Transition, lyapunov, reward, step_queue

__all__ = [
    "ConfigError", "ContractViolation", "TrainingError",
    "RewardShaper", "ShaperKind", "Transition", "lyapunov", "reward", "step_queue",
]
__version__ = "0.1.0"
