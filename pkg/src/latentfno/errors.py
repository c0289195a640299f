"""Exception hierarchy shared by every module."""


class LatentFNOError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LatentFNOError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(LatentFNOError, ValueError):
    """A configuration value is missing, unknown or inconsistent."""


class NumericalBlowupError(LatentFNOError, ArithmeticError):
    def __init__(self, time_ms: float, message: str = ""):
        self.time_ms = time_ms
        super().__init__(message or f"non-finite membrane state at t={time_ms:.4f} ms")


class EnsembleGenerationError(LatentFNOError):
    """Ensemble sampling ran out of retries."""


class ThresholdNotFoundError(LatentFNOError):
    """The neuron never fires inside the searched amplitude range."""


class GeometryError(LatentFNOError, ValueError):
    """Degenerate point set for a hull or region."""


class FormatError(LatentFNOError):
    """Binary container has wrong magic, version, kind or checksum."""


class DatasetError(LatentFNOError, ValueError):
    """A dataset does not satisfy the requirements of an operation."""


class TrainingError(LatentFNOError):
    """Optimization hit a non-finite loss or gradient."""


class TruncatedFileError(FormatError, OSError):
    """A binary container ended before its declared contents."""
