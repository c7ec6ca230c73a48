"""Bayesian joint models for multivariate longitudinal and time-to-event data
with multivariate functional principal components as random-effects basis."""

from .data import LongSurvDataset
from .errors import (ConfigError, DomainError, EstimationError, NumericalError, OptimizationError,
                     SchemaError, SimulationError)
from .fpca import MfpcBasis, UfpcaResult, estimate_mfpc_basis

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "EstimationError", "LongSurvDataset", "MfpcBasis", "NumericalError",
    "OptimizationError", "SchemaError", "SimulationError", "UfpcaResult", "estimate_mfpc_basis",
]
