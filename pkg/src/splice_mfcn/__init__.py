"""Splicing localization with single- and multi-task fully convolutional networks."""

from .model import CheckpointError, ConfigError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import ShapeError

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ModelConfig",
    "ShapeError",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
]
