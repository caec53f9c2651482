"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numerical failures exit 4.
"""


class EpimixError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(EpimixError):
    """Invalid model, link, or run configuration."""


class DataError(EpimixError):
    """Missing or malformed input data."""


class NumericalError(EpimixError):
    """Numerical failure (integration blow-up, singular covariance, ...)."""


class DomainError(EpimixError, ValueError):
    """Argument outside the mathematical domain of an operation."""
