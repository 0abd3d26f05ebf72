"""Differentiable frame-based phaser modelling."""

from .signals import AudioBuffer, DatasetPair
from .spectral import FrameConfig
from .model import ModelHyper, ModelParams, MlpParams  # noqa: E402

__all__ = [
    "AudioBuffer",
    "DatasetPair",
    "FrameConfig",
    "ModelHyper",
    "ModelParams",
    "MlpParams",
]

__version__ = "0.1.0"
