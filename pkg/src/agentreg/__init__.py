"""Agent-bridged image-to-point-cloud registration at desk scale."""

from .errors import (
    AgentRegError, ConfigurationError, ContractViolationError, DataError,
    DegenerateConfigurationError, DegenerateInputError, DimensionError,
    EstimationFailureError, GenerationError, InsufficientDataError,
    NumericalError,
)
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "AgentRegError", "ConfigurationError", "ContractViolationError",
    "DataError", "DegenerateConfigurationError", "DegenerateInputError",
    "DimensionError", "EstimationFailureError", "GenerationError",
    "InsufficientDataError", "NumericalError", "Rng", "__version__",
]
