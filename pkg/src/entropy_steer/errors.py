"""Exception types shared across the package.

The CLI maps each family onto an exit code, see ``entropy_steer.cli``.
"""


class EntropySteerError(Exception):
    """Base class for all package errors."""


class ConfigError(EntropySteerError, ValueError):
    """A configuration or argument violates its invariants."""


class WeightsFormatError(EntropySteerError, ValueError):
    """The weights file is malformed. ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class CacheFullError(EntropySteerError, ValueError):
    pass


class StaleActivationsError(EntropySteerError, ValueError):
    """Saved activations do not belong to the step being differentiated."""


class NumericalError(EntropySteerError, ArithmeticError):
    """A non-finite value was produced where a finite one is required."""
