"""Causal counterfactual regularisation and bidirectional flow refinement for
score regression on clip-feature sequences."""

from ._accel import BACKEND
from .errors import (CaflowError, ConfigError, ContractError, DomainError, FormatError,
                     IngestionError, MetricError, NumericError, ShapeError)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CaflowError", "ConfigError", "ContractError", "DomainError", "FormatError",
    "IngestionError", "MetricError", "NumericError", "ShapeError", "__version__",
]
