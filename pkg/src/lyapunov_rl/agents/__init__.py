from .dqn import DqnAgent, DqnConfig, ReplayBuffer
from .ppo import PpoAgent, PpoConfig
from .train import EvalResult, RunningNorm, TrainResult, evaluate, make_agent, train

__all__ = [
    "DqnAgent", "DqnConfig", "ReplayBuffer", "PpoAgent", "PpoConfig",
    "EvalResult", "RunningNorm", "TrainResult", "evaluate", "make_agent", "train",
]
