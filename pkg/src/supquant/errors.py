"""Exception types raised across the package."""

import numpy as np


class SupquantError(Exception):
    """Base class for all package errors."""


class FormatError(SupquantError, ValueError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionMismatchError(SupquantError, ValueError):
    """Array shapes disagree."""


class LabelRangeError(SupquantError, ValueError):
    """A class id falls outside [0, num_classes)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SingularMatrixError(SupquantError, np.linalg.LinAlgError):
    """A linear system could not be factorized."""


class NonFiniteError(SupquantError, FloatingPointError):
    """An objective callback produced NaN or inf."""

    def __init__(self, message, point):
        super().__init__(message)
        self.point = np.array(point, copy=True)
