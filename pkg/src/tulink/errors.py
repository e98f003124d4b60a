"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(RuntimeError):
    """Unusable input data or missing pipeline artifacts."""


class TrainingError(RuntimeError):
    """Optimization failure, e.g. a non-finite loss or gradient."""
