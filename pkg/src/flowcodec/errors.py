"""Exception types shared across the codec."""


class FlowcodecError(Exception):
    """Base class for all codec errors."""


class ShapeError(FlowcodecError):
    """An operand has a shape the operation cannot accept."""


class NumericsError(FlowcodecError):
    """A computation produced non-finite values."""


class InvertibilityError(FlowcodecError):
    """A nominally invertible transform is numerically singular."""


class CorruptStream(FlowcodecError):
    """A compressed stream failed validation (magic, CRC, or symbol range)."""


class TruncatedStream(CorruptStream):
    """A compressed stream ended before the declared payload."""


class UnsupportedVersion(FlowcodecError):
    """A stream or checkpoint was written by an unknown format version."""


class CheckpointError(FlowcodecError):
    """A checkpoint file failed validation or shape checks."""


class ConfigError(FlowcodecError):
    """A run configuration is inconsistent or out of range."""
