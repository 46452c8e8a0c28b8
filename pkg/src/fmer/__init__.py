"""Flow-matching policies with entropy regularization for off-policy RL, on numpy."""

from .config import TrainConfig, preset
from .agent import Trainer, run_training

__all__ = ["TrainConfig", "preset", "Trainer", "run_training"]
__version__ = "0.1.0"
