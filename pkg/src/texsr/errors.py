"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data errors
exit 2, numeric failures exit 3.
"""


class TexsrError(Exception):
    """Base class for all package errors."""


class UsageError(TexsrError):
    """Invalid invocation: bad flags, missing inputs, mode mismatches."""


class DataError(TexsrError):
    """Input data cannot be used: bad files, shape mismatches, bad values."""


class MalformedHeaderError(DataError):
    """File header is not a recognized image/tensor header."""


class UnsupportedBitDepthError(DataError):
    """Image sample depth outside the supported 8/16-bit range."""


class TruncatedPayloadError(DataError):
    """File payload shorter than the header promises."""


class FormatVersionError(DataError):
    """Tensor/checkpoint container version not understood."""


class ShapeError(DataError, ValueError):
    """Array dimensions or channel counts do not line up."""


class NumericError(TexsrError):
    """Computation produced non-finite values."""
