"""Mutual-information-calibrated conformal fusion of two sensor modalities."""

from .conformal import CalibrationState, ConformalConfig, PredictionSet
from .model import ModelConfig
from .synthdata import DataConfig, SceneSample
from .trainer import EvalReport, EpochMetrics, TrainConfig

__all__ = [
    "CalibrationState",
    "ConformalConfig",
    "DataConfig",
    "EpochMetrics",
    "EvalReport",
    "ModelConfig",
    "PredictionSet",
    "SceneSample",
    "TrainConfig",
]

__version__ = "0.1.0"
