"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: configuration / usage problems exit 1,
numerical-contract failures exit 2.
"""


class AnalogMdError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AnalogMdError):
    """Invalid configuration value, grid size, or config/mapping file."""


class ContractViolation(AnalogMdError):
    """Caller broke an internal contract (shape/length mismatch, misuse)."""


class EvaluationError(AnalogMdError):
    """Numerical evaluation cannot proceed (e.g. channel grid coverage)."""


class DomainError(AnalogMdError):
    """Query outside the mathematically feasible domain."""


class ConsistencyError(AnalogMdError):
    """Two redundant computations of the same quantity disagree."""
