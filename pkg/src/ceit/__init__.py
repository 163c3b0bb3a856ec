"""Convolution-enhanced image transformer blocks on a small numpy autodiff core."""

from .config import ConfigError, I2TConfig, ModelConfig, TrainConfig, preset
from .model import CeiT, TokenSequence
from .tensor import Tensor

__all__ = ["CeiT", "ConfigError", "I2TConfig", "ModelConfig", "Tensor", "TokenSequence", "TrainConfig", "preset"]
__version__ = "0.1.0"
