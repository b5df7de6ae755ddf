"""Exception hierarchy.

Each family maps onto one CLI exit code: usage problems exit 1, bad input data
exits 2 and numeric failures exit 3.
"""


class TftError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class UsageError(TftError):
    exit_code = 1


class ShapeError(TftError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class DataError(TftError):
    """A file or dataset could not be decoded."""

    exit_code = 2
    code = "data"


class BadMagicError(DataError):
    code = "bad-magic"


class VersionMismatchError(DataError):
    code = "version-mismatch"


class TruncationError(DataError):
    code = "truncation"


class ChecksumError(DataError):
    code = "checksum"


class CountMismatchError(DataError):
    code = "count-mismatch"


class FormatError(DataError):
    code = "format"


class NumericError(TftError):
    """A computation produced non-finite values or could not proceed."""

    exit_code = 3

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NoMassError(NumericError, ValueError):
    """Center of mass requested for a map whose total absolute mass is zero."""


class SingularMatrixError(NumericError, ValueError):
    """An affine matrix is not invertible or not in homogeneous form."""
