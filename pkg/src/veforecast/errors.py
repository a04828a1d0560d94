"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. ShapeError is a programming-contract violation raised by
the numeric and model layers.
"""


class VEForecastError(Exception):
    """Base class for all package errors."""


class ShapeError(VEForecastError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(VEForecastError, ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(VEForecastError, ValueError):
    """Dataset could not be loaded or fails basic sanity checks."""


class InsufficientDataError(DataError):
    """A split or series is too short for the requested windowing."""


class NumericError(VEForecastError, ArithmeticError):
    """A computation produced non-finite values."""
