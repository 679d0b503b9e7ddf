"""Dynamic bilinear low-rank attention (DBA) with vanilla baselines, a small
autodiff engine, validation checks, a benchmark harness and a toy trainer."""

from .attention import AttentionConfig, DbaParams, FixedParams, VanillaParams
from .errors import (CheckpointError, ContractError, DbaError, DimensionError, GraphError,
                     ParameterError, TrainingError)

__all__ = [
    "AttentionConfig", "DbaParams", "FixedParams", "VanillaParams",
    "CheckpointError", "ContractError", "DbaError", "DimensionError", "GraphError",
    "ParameterError", "TrainingError",
]
__version__ = "0.1.0"
