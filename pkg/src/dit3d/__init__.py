"""Voxel diffusion transformer for point-cloud generation, on a small numpy autodiff core."""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    Dit3DError,
    FormatError,
    NumericError,
    ParseError,
    ScaleError,
    TransferError,
)
from .model import ModelConfig, NoisePredictor
from .diffusion import make_schedule, sample
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "Dit3DError", "FormatError", "NumericError",
    "ParseError", "ScaleError", "TransferError", "ModelConfig", "NoisePredictor", "make_schedule",
    "sample", "Tensor", "no_grad", "precision",
]
