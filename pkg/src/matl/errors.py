"""Exception hierarchy shared by the library and the CLI.

The CLI maps :class:`UsageError` (and subclasses) to exit code 2 and
:class:`TrainingError` to exit code 3.
"""


class MatlError(Exception):
    """Base class for every error raised by this package."""


class UsageError(MatlError, ValueError):
    """Caller violated an API precondition."""


class DimensionError(UsageError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(UsageError):
    """Invalid configuration value; the message carries the field path."""


class AnnotationError(UsageError):
    """A box annotation is malformed (e.g. nonpositive width)."""


class ValidationError(UsageError):
    """Dataset content failed validation (manifest, bounds, masks)."""


class CropError(UsageError):
    """An object cannot be placed inside a tile of the requested size."""


class GradCheckError(MatlError, ArithmeticError):
    """A function evaluated to a non-finite value during gradient checking."""


class TrainingError(MatlError, RuntimeError):
    """Training diverged or received non-finite values."""
