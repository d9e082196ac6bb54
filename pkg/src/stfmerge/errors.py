"""Exception hierarchy shared across the package.

Every error optionally carries the name of the tensor it concerns so the CLI
can print a one-line diagnostic that points at the offending parameter.
"""

from __future__ import annotations


class MergeError(Exception):
    """Base class for all stfmerge errors."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor

    def __str__(self) -> str:
        msg = super().__str__()
        if self.tensor is not None:
            return f"{self.tensor}: {msg}"
        return msg


class ConfigError(MergeError, ValueError):
    """Invalid configuration value, role rule, or CLI flag."""


class FormatError(MergeError):
    """Checkpoint file does not conform to the container format."""


class DtypeError(FormatError):
    """Tensor element type is not supported."""


class SchemaError(MergeError):
    """Checkpoints in a set disagree on which tensors they contain."""


class ShapeError(MergeError, ValueError):
    """Array shapes are incompatible."""


class NumericError(MergeError, ArithmeticError):
    """Non-finite values or a failed decomposition."""


class StoreIOError(MergeError, OSError):
    """Reading or writing a checkpoint file failed at the OS level."""
