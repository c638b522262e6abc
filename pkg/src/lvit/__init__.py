"""Lightweight Vision Transformer for 10-class SAR target classification."""

from .autodiff import ComputeRecord, Parameter, RngState, Tensor
from .model import ModelConfig, ModelParams, forward, init_params, predict
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "ComputeRecord", "Parameter", "RngState", "Tensor",
    "ModelConfig", "ModelParams", "forward", "init_params", "predict",
    "TrainConfig", "fit",
]
