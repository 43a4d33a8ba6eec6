"""Convolutional-transformer stress detection from single-lead ECG."""

from .autograd import Rng, Tensor, backward, no_grad
from .errors import (
    ConfigError,
    DataError,
    EcgStressError,
    FormatError,
    LeakageError,
    NumericError,
    ShapeError,
)
from .ingest import EcgRecord, WindowSet
from .model import ModelConfig, ModelParams, forward, init_params, predict_proba
from .training import EvalReport, TrainConfig, run_loso, train

__all__ = [
    "ConfigError",
    "DataError",
    "EcgRecord",
    "EcgStressError",
    "EvalReport",
    "FormatError",
    "LeakageError",
    "ModelConfig",
    "ModelParams",
    "NumericError",
    "Rng",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "WindowSet",
    "backward",
    "forward",
    "init_params",
    "no_grad",
    "predict_proba",
    "run_loso",
    "train",
]
