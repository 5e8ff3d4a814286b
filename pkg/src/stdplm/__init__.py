"""Spatial-temporal forecasting and imputation on sensor graphs with a pre-trained transformer backbone."""
from .config import DataConfig, ExperimentConfig, MissingConfig, ModelConfig, TrainConfig, load_config
from .model import ModelOutput, StdPlmModel
from .spectral import SensorGraph

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "ExperimentConfig",
    "MissingConfig",
    "ModelConfig",
    "ModelOutput",
    "SensorGraph",
    "StdPlmModel",
    "TrainConfig",
    "load_config",
]
