"""
Timbre Exceptions Module.
Error hierarchy shared by the DSP, model, training and CLI layers.
"""
from typing import Any, Dict


class TimbreError(Exception):
    """Base class for all engine errors."""

    code: str = "timbre_error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable error payload (one JSON line on the CLI)."""
        payload: Dict[str, Any] = {"error": self.code, "message": self.message}
        if self.context:
            payload["context"] = self.context
        return payload


class DomainError(TimbreError, ValueError):
    """Argument outside the domain of an operation."""

    code = "domain_error"


class ShapeError(TimbreError, ValueError):
    """Operand dimensions do not agree."""

    code = "shape_error"


class ReconstructionError(TimbreError):
    """Signal reconstruction could not satisfy its contract."""

    code = "reconstruction_error"


class NonFiniteError(TimbreError, ArithmeticError):
    """A value that must be finite is NaN or infinite."""

    code = "non_finite"


class AudioFormatError(TimbreError):
    """Malformed or unsupported WAV content."""

    code = "audio_format_error"


class SampleRateError(TimbreError):
    """Audio is not at a supported or expected sample rate."""

    code = "sample_rate_error"


class CheckpointError(TimbreError):
    """Checkpoint or feature cache cannot be read."""

    code = "checkpoint_error"


class CheckpointVersionError(CheckpointError):
    """Container written with an unknown format version."""

    code = "checkpoint_version_error"


class ConfigError(TimbreError, ValueError):
    """Invalid or unknown configuration key."""

    code = "config_error"


class CorpusError(TimbreError):
    """Manifest entry missing or corpus unusable for training."""

    code = "corpus_error"
