"""Exception types shared across the package."""


class DriftDetError(Exception):
    """Base class for package errors."""


class ConfigError(DriftDetError):
    """Invalid configuration or usage (CLI exit code 1)."""


class DataError(DriftDetError):
    """Malformed or missing data on disk (CLI exit code 2)."""


class NumericalError(DriftDetError):
    """Non-finite loss or gradient during training (CLI exit code 3)."""
