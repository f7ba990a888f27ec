"""Patch-transformer encoder with a bidirectional GRU head, trained on a tape-based autodiff engine."""

from .data import AugmentConfig, DatasetIndex, ImageSample
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GraphError,
    LoadError,
    NumericError,
    ShapeError,
    StateError,
    VitGruError,
)
from .gradcheck import GradCheckReport, grad_check
from .head import HeadConfig, HeadParams
from .metrics import ConfusionMatrix, MetricsReport
from .model import Model, ModelConfig
from .tensor import Tape, Tensor, backward
from .train import Adam, TrainConfig, cosine_lr, cross_entropy
from .vit import ViTConfig, ViTParams

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AugmentConfig",
    "ConfigError",
    "ConfusionMatrix",
    "DataError",
    "DatasetIndex",
    "FormatError",
    "GradCheckReport",
    "GraphError",
    "HeadConfig",
    "HeadParams",
    "ImageSample",
    "LoadError",
    "MetricsReport",
    "Model",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "StateError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "ViTConfig",
    "ViTParams",
    "VitGruError",
    "backward",
    "cosine_lr",
    "cross_entropy",
    "grad_check",
]
