"""Multi-unit transformer laboratory.

A small, self-contained implementation of multi-unit encoder layers:
parallel attention/FFN units fused by learnable weights, input-noise
bias modules, sequential residual accumulation over a learned unit
ordering, and the training/analysis harness around them.  Everything
runs on numpy float64 through a hand-rolled reverse-mode tensor engine.
"""

__version__ = "0.1.0"

from .errors import (CheckpointFormatError, ConfigError, ContractError,
                     DataError, GradCheckError, MuteLabError,
                     ProjectionError, ShapeError, TrainingError)
from .model import ModelConfig, MuteModel
from .tasks import TaskSpec
from .tensor import Tensor
from .trainer import TrainConfig, Trainer

__all__ = [
    "CheckpointFormatError", "ConfigError", "ContractError", "DataError",
    "GradCheckError", "ModelConfig", "MuteLabError", "MuteModel",
    "ProjectionError", "ShapeError", "TaskSpec", "Tensor", "TrainConfig",
    "Trainer", "TrainingError", "__version__",
]
