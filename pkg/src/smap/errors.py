"""Shared exception types."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ConfigError(ValueError):
    """Raised for invalid configuration values or malformed config files."""


class UsageError(RuntimeError):
    """Raised when an API is driven incorrectly, e.g. stepping a finished episode."""
