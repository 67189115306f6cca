"""Exception types shared by the codec modules."""


class CodecError(Exception):
    """Base class for every error this package raises deliberately."""


class ConfigError(CodecError):
    """Invalid or inconsistent configuration value."""


class ShapeError(CodecError):
    """Array argument has the wrong shape or dtype."""


class RangeError(CodecError):
    """Numeric argument outside its permitted interval."""


class AlignmentError(CodecError):
    """Operands that must share coordinates or length do not."""


class EmptySliceError(CodecError):
    """A level operation received an empty coordinate set."""


class CorruptSliceError(CodecError):
    """Occupancy data violates the one-occupied-child-per-parent minimum."""


class IncompleteStateError(CodecError):
    """Channel state still has undecoded entries where none are allowed."""


class SymbolError(CodecError):
    """Symbol outside the alphabet handed to the entropy coder."""


class DistributionError(CodecError):
    """Probability vector is malformed (NaN, negative, or zero mass)."""


class StreamCorruptError(CodecError):
    """Bitstream ended early or failed an internal consistency check."""


class IncompatibleStreamError(CodecError):
    """Bitstream header is valid but this build cannot decode it."""


class PlyParseError(CodecError):
    """PLY input rejected; carries the byte offset of the offending data."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(CodecError):
    """Optimization failed (non-finite loss or gradients)."""


class MetricError(CodecError):
    """Metric undefined for the given inputs (e.g. empty cloud)."""
