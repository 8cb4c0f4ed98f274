"""Exception hierarchy shared by all fbst modules."""


class FBSTError(Exception):
    """Base class for every error raised by this package."""


class DataError(FBSTError):
    """Bad or unreadable input data (files, shapes, headers)."""


class PGMError(DataError):
    """Base class for PGM parse failures."""


class UnsupportedFormatError(PGMError):
    """The file magic is not ``P5``."""


class MalformedHeaderError(PGMError):
    """The PGM header could not be parsed."""


class TruncatedPayloadError(PGMError):
    """The pixel payload is shorter than the header promises."""


class ModelFormatError(DataError):
    """A model file is malformed."""


class ChecksumError(ModelFormatError):
    """A model file failed its CRC32 check."""


class ShapeError(DataError, ValueError):
    """Array dimensions are incompatible with the requested operation."""


class NumericalError(FBSTError):
    """Base class for numerical infeasibility."""


class DegenerateInputError(NumericalError, ValueError):
    """Input is degenerate, e.g. an all-zero image that cannot be normalized."""


class SingularOperatorError(NumericalError):
    """A filter bank Gram operator is singular at the requested size."""


class InfeasibleTransformError(NumericalError):
    """A transform violates the barrier constraints of the learning objective."""
