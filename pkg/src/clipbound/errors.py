"""Exception hierarchy shared across the package."""


class ClipboundError(Exception):
    """Base class for all package errors."""


class ParameterError(ClipboundError, ValueError):
    """An argument is outside its documented domain."""


class ConfigError(ClipboundError, ValueError):
    """A run config file fails validation."""


class DataFormatError(ClipboundError, ValueError):
    """An input file does not match its declared format."""


class CalibrationError(ClipboundError, RuntimeError):
    """Noise calibration cannot reach the requested target."""


class MetricError(ClipboundError, ValueError):
    """A metric is undefined for the given counts (e.g. an empty class)."""


class TrainingDiverged(ClipboundError, RuntimeError):
    """Training aborted on a non-finite or exploding loss.

    Carries the partial per-step history for diagnostics.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []
