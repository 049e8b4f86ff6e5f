"""
Diagnosis Engine — Errors
==========================
Every failure the package raises on purpose derives from DiagnosisError.
Validation-type errors also derive from ValueError so callers that only
know the builtin still catch them.
"""


class DiagnosisError(Exception):
    """Base class for all package errors."""


class ModelValidationError(DiagnosisError, ValueError):
    """A structural model violates one of its invariants."""


class MatchingError(DiagnosisError):
    """No complete matching exists for a residual design."""

    def __init__(self, message, unmatched=()):
        super().__init__(message)
        self.unmatched = tuple(unmatched)


class SimulationError(DiagnosisError):
    """Integration produced a non-finite state."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class TrainingDivergedError(DiagnosisError):
    """A training loss became non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DecisionError(DiagnosisError, ValueError):
    """Invalid input to the decision logic."""


class MetricsError(DiagnosisError, ValueError):
    """A metric cannot be computed from the given matrices."""


class ConfigError(DiagnosisError, ValueError):
    """Bad experiment configuration; `path` is the dotted field path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class IngestError(DiagnosisError, ValueError):
    """External data failed validation."""


class CheckpointError(DiagnosisError):
    """A checkpoint is missing, unreadable or of another format version."""
