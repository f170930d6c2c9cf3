"""Exception hierarchy shared by every CobNet module."""

from typing import List, Optional


class CobNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CobNetError, ValueError):
    """Tensor shapes do not fit the operation."""


class ValidationError(CobNetError, ValueError):
    """Values are outside the domain an operation accepts."""


class UsageError(CobNetError, RuntimeError):
    """An API was called in a state where it cannot run."""


class EmptyMaskError(CobNetError, ValueError):
    """A support mask has no foreground pixel at feature resolution."""


class ConfigurationError(CobNetError, ValueError):
    """A configuration value or combination is invalid."""


class MissingCheckpointError(ConfigurationError):
    """A checkpoint directory or one of its parameter files is missing."""


class TensorFormatError(CobNetError, ValueError):
    """A CBT1 tensor file is malformed."""


class EpisodeSamplingError(CobNetError, RuntimeError):
    """Episode sampling kept producing rejected episodes."""


class TrainingDivergedError(CobNetError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path


class GradientCheckError(CobNetError, AssertionError):
    """Analytic gradients disagree with finite differences."""

    def __init__(self, message: str, offenders: Optional[List[str]] = None):
        super().__init__(message)
        self.offenders = offenders or []
