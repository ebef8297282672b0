"""Exception types shared across the package."""

__all__ = [
    "ConfigError",
    "NumericalError",
    "SingularContextError",
    "MissingSeriesError",
]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class SingularContextError(NumericalError):
    """A context's normal matrix is singular and no ridge term rescues it."""


class MissingSeriesError(KeyError):
    """A plot-data export found required series absent from the store."""
