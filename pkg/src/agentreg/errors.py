"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4).
"""


class AgentRegError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(AgentRegError, ValueError):
    """Array shapes or sizes violate an operation's contract."""


class DegenerateInputError(AgentRegError, ValueError):
    """Input is mathematically degenerate (zero norm, all-zero channel)."""


class ConfigurationError(AgentRegError, ValueError):
    """Invalid or inconsistent configuration values."""


class ContractViolationError(AgentRegError, ValueError):
    """A documented precondition was violated by the caller."""


class InsufficientDataError(AgentRegError, ValueError):
    """Too few samples to run the requested estimation."""


class DegenerateConfigurationError(AgentRegError, ValueError):
    """Geometric configuration is rank deficient (collinear/coplanar points)."""


class EstimationFailureError(AgentRegError, RuntimeError):
    """Robust estimation found no acceptable hypothesis."""


class GenerationError(AgentRegError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DataError(AgentRegError, RuntimeError):
    """A data file is missing, unreadable, or malformed."""


class NumericalError(AgentRegError, RuntimeError):
    """A numerical failure (NaN/Inf loss) aborted a computation."""
