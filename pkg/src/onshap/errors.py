"""Exception types shared across the package."""

from __future__ import annotations


class OnshapError(Exception):
    """Base class for all package-specific errors."""


class InputShapeError(OnshapError, ValueError):
    """An array argument has the wrong dimensionality or width."""


class SchemaError(OnshapError, ValueError):
    """Feature schema mismatch between a dataset and a model/imputer."""


class DataError(OnshapError):
    """Missing, malformed, or invalid input data."""


class TrainingError(OnshapError):
    """Optimisation diverged or failed.

    ``last_finite_epoch`` is the index of the last epoch whose validation
    loss was finite, or -1 if none was.
    """

    def __init__(self, message: str, last_finite_epoch: int = -1):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class NumericError(OnshapError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message: str, context: object = None):
        super().__init__(message)
        self.context = context
