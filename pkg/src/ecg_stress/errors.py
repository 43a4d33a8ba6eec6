"""Exception types shared across the pipeline.

The CLI maps each family to its own exit code, so callers should raise the
most specific class that applies.
"""


class EcgStressError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EcgStressError, ValueError):
    """Invalid model, training or run configuration."""


class ShapeError(EcgStressError, ValueError):
    """Tensor shapes do not agree for an operation."""


class DataError(EcgStressError, ValueError):
    """Input data violates a documented contract (codes, lengths, classes)."""


class FormatError(DataError):
    """A binary file failed validation while being read or written."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(EcgStressError, ArithmeticError):
    """Non-finite values or out-of-range probabilities during computation."""


class LeakageError(EcgStressError, AssertionError):
    """An evaluation window was used to update parameters."""
