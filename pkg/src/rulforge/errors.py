"""Exception types raised across the toolkit."""


class RulforgeError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(RulforgeError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class ConfigError(RulforgeError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InsufficientDataError(RulforgeError, ValueError):
    """Not enough data points to perform the requested computation."""


class DegenerateRangeError(InsufficientDataError):
    """A signal has zero range where a non-empty range is required."""


class WindowBoundsError(RulforgeError, IndexError):
    """A sample window reaches before the first available cycle."""

    def __init__(self, message, min_valid_index):
        super().__init__(message)
        self.min_valid_index = min_valid_index


class ParseError(RulforgeError, ValueError):
    """Malformed input file."""


class ContractError(RulforgeError, ValueError):
    """A call violated an operation precondition."""


class StateError(RulforgeError, RuntimeError):
    """An object was used before it was ready (e.g. an unfitted scaler)."""
