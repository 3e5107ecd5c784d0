"""
Exception hierarchy for the S2C codec.
Every failure the library raises on purpose derives from S2CError so the CLI
can map it to an exit code.
"""


class S2CError(Exception):
    """Base class for all codec errors."""


class ConfigurationError(S2CError, ValueError):
    """Invalid block, model, entropy or training configuration."""


class ParameterShapeError(S2CError, ValueError):
    """A parameter store does not match the shapes its spec requires."""


class DimensionError(S2CError, ValueError):
    """Input spatial size is incompatible with the transform stack."""


class MetadataError(S2CError, ValueError):
    """Size or header metadata needed for reconstruction is missing."""


class ContextOrderError(S2CError, RuntimeError):
    """Context parameters requested out of decoding order."""


class CodingError(S2CError, ValueError):
    """A symbol or table cannot be entropy coded."""


class DecodeError(S2CError, ValueError):
    """A bitstream is truncated or corrupt."""


class IncompatibleStreamError(S2CError):
    """A compressed file does not match the decoding model."""


class DataError(S2CError):
    """Dataset or input image problems."""


class TrainingHaltError(S2CError, RuntimeError):
    """Training stopped on a non-finite loss."""

    def __init__(self, message: str, step: int, snapshot_path=None):
        super().__init__(message)
        self.step = step
        self.snapshot_path = snapshot_path


class NoOverlapError(S2CError, ValueError):
    """Two RD curves share no quality range."""


class ProfilerError(S2CError, ValueError):
    """Invalid profiling request."""
