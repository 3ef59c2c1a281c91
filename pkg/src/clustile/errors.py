"""Error taxonomy shared by all modules.

The CLI maps these onto exit codes: ValidationError (and its subclasses)
exit 2, OS-level I/O errors exit 3, NumericalError exit 4.
"""


class ClustileError(Exception):
    pass


class ValidationError(ClustileError):
    """Invalid inputs: bad geometry, shape mismatches, out-of-range values."""


class TensorFormatError(ValidationError):
    """Malformed tensor container or manifest file."""


class DegenerateDataError(ValidationError):
    """Data carries no usable signal (e.g. all-constant features)."""


class NumericalError(ClustileError):
    """Non-finite values encountered mid-computation."""
