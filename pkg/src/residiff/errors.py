"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid hyperparameters, schedules or config files."""


class DataError(ValueError):
    """Malformed input data (ragged rows, non-numeric cells, NaN)."""


class NumericalError(RuntimeError):
    """Non-finite values produced during training or sampling."""
