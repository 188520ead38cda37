"""Proportional-fair EDCA tuning: analytic model, optimiser, simulator and LQI control."""

from .config import TABLE1, AcClass, NetworkConfig, ProtocolTimings, edca_classes
from .errors import (ConfigError, DimensionError, DomainError, EdcaError, Infeasible,
                     NonConvergence, OutOfRange, UncontrollableError)

__version__ = "0.1.0"

__all__ = [
    "TABLE1", "AcClass", "NetworkConfig", "ProtocolTimings", "edca_classes",
    "ConfigError", "DimensionError", "DomainError", "EdcaError", "Infeasible",
    "NonConvergence", "OutOfRange", "UncontrollableError",
]
