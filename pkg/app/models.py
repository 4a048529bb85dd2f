"""
Timbre Engine Data Models.
Pydantic models for configuration, signal containers and training reports.
"""
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class WindowShape(str, Enum):
    """Supported analysis windows."""
    HANN = "hann"


class Domain(str, Enum):
    """The two unpaired audio domains."""
    X = "x"
    Y = "y"

    @property
    def other(self) -> "Domain":
        return Domain.Y if self is Domain.X else Domain.X


class Direction(str, Enum):
    """Transfer direction between the domains."""
    X2Y = "x2y"
    Y2X = "y2x"

    @property
    def source(self) -> Domain:
        return Domain.X if self is Direction.X2Y else Domain.Y

    @property
    def target(self) -> Domain:
        return self.source.other


class FeatureSet(str, Enum):
    """Which timbre channels the translator sees."""
    MS = "ms"      # mel-spectrogram only
    MC = "mc"      # mel-spectrogram + MFCC
    ALL = "all"    # mel, MFCC, spectral difference, spectral envelope

    @property
    def channels(self) -> Tuple[str, ...]:
        return {
            FeatureSet.MS: ("mel",),
            FeatureSet.MC: ("mel", "mfcc"),
            FeatureSet.ALL: ("mel", "mfcc", "sdiff", "senv"),
        }[self]

    @property
    def n_channels(self) -> int:
        return len(self.channels)


class Split(str, Enum):
    """Corpus split."""
    TRAIN = "train"
    EVAL = "eval"


class StepRule(str, Enum):
    """NNLS update rule."""
    PROJECTED_GRADIENT = "projected_gradient"


# ==================== Configuration ====================


class WindowSpec(BaseModel):
    """STFT framing: window length, hop and shape."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    size: int = Field(default=2048, gt=0)
    hop: int = Field(default=256, gt=0)
    shape: WindowShape = WindowShape.HANN

    @model_validator(mode="after")
    def check_hop(self) -> "WindowSpec":
        if self.hop > self.size:
            raise ValueError(f"hop ({self.hop}) must not exceed window size ({self.size})")
        return self


class FeatureConfig(BaseModel):
    """Parameters of the timbre feature chain."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    sample_rate: int = Field(default=22050, gt=0)
    n_fft: int = Field(default=2048, gt=0)
    hop: int = Field(default=256, gt=0)
    n_mels: int = Field(default=256, gt=0)
    f_min: float = Field(default=0.0, ge=0.0)
    f_max: float = Field(default=11025.0, gt=0.0)
    gamma: float = Field(default=0.6, gt=0.0, le=1.0)
    eta: int = Field(default=15, ge=0)

    @model_validator(mode="after")
    def check_ranges(self) -> "FeatureConfig":
        if self.eta >= self.n_mels:
            raise ValueError(f"eta ({self.eta}) must be below n_mels ({self.n_mels})")
        if self.hop > self.n_fft:
            raise ValueError("hop must not exceed n_fft")
        if self.f_max > self.sample_rate / 2:
            raise ValueError("f_max must not exceed the Nyquist frequency")
        if self.f_min >= self.f_max:
            raise ValueError("f_min must be below f_max")
        return self

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(size=self.n_fft, hop=self.hop)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


class NnlsConfig(BaseModel):
    """Solver parameters for mel-spectrogram inversion."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iters: int = Field(default=200, ge=1)
    tol: float = Field(default=1e-4, gt=0.0)  # relative residual
    step_rule: StepRule = StepRule.PROJECTED_GRADIENT


class LossWeights(BaseModel):
    """Regularization weights of the full objective."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_c: float = Field(default=1.0, ge=0.0)
    lambda_s: float = Field(default=1.0, ge=0.0)
    lambda_r: float = Field(default=10.0, ge=0.0)
    lambda_mfcc: float = Field(default=1.0, ge=0.0)
    lambda_delta: float = Field(default=1.0, ge=0.0)
    lambda_env: float = Field(default=1.0, ge=0.0)


class NetworkConfig(BaseModel):
    """Widths and depths of the encoder/decoder/discriminator skeleton."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    feature_set: FeatureSet = FeatureSet.ALL
    base_channels: int = Field(default=16, ge=1)
    n_res: int = Field(default=3, ge=0)
    style_dim: int = Field(default=8, ge=1)
    mlp_dim: int = Field(default=64, ge=1)

    @property
    def in_channels(self) -> int:
        return self.feature_set.n_channels


class TrainConfig(BaseModel):
    """Optimizer and schedule parameters."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    batch_size: int = 1
    max_iters: int = Field(default=500, ge=0)
    seed: int = 0
    weights: LossWeights = Field(default_factory=LossWeights)
    patch_frames: int = Field(default=256, ge=16)  # multiple of 16
    checkpoint_every: int = Field(default=0, ge=0)  # 0 = final checkpoint only
    log_every: int = Field(default=10, ge=1)

    @field_validator("batch_size")
    @classmethod
    def validate_batch_size(cls, v: int) -> int:
        if v != 1:
            raise ValueError("batch_size must be 1")
        return v

    @field_validator("patch_frames")
    @classmethod
    def validate_patch_frames(cls, v: int) -> int:
        # four stride-2 stages in the style encoder and discriminator
        if v % 16:
            raise ValueError("patch_frames must be a multiple of 16")
        return v


# ==================== Reports ====================


class LossReport(BaseModel):
    """All loss terms of one training iteration."""

    adv_g: float = 0.0
    adv_d: float = 0.0
    content: float = 0.0
    style: float = 0.0
    recon: float = 0.0
    ic_mfcc: float = 0.0
    ic_delta: float = 0.0
    ic_env: float = 0.0
    total: float = 0.0

    LOG_KEYS: ClassVar[Tuple[str, ...]] = (
        "adv_g", "adv_d", "content", "style", "recon",
        "ic_mfcc", "ic_delta", "ic_env", "total",
    )

    def ic_total(self, weights: LossWeights) -> float:
        return (
            weights.lambda_mfcc * self.ic_mfcc
            + weights.lambda_delta * self.ic_delta
            + weights.lambda_env * self.ic_env
        )

    def log_line(self, step: int) -> str:
        """Plain-text metrics record: "iter key=value ..."."""
        values = " ".join(f"{key}={getattr(self, key)!r}" for key in self.LOG_KEYS)
        return f"{step} {values}"

    @classmethod
    def parse_line(cls, line: str) -> Tuple[int, "LossReport"]:
        step, *pairs = line.split()
        fields = dict(pair.split("=", 1) for pair in pairs)
        return int(step), cls(**{k: float(v) for k, v in fields.items()})


# ==================== Corpus ====================


class ManifestEntry(BaseModel):
    """One audio file of a corpus."""
    path: Path
    duration: float = Field(gt=0.0)  # seconds
    sample_rate: int = Field(gt=0)


class CorpusManifest(BaseModel):
    """Ordered list of audio files belonging to one domain and split."""
    domain: Domain
    split: Split = Split.TRAIN
    entries: List[ManifestEntry] = Field(default_factory=list)

    @property
    def paths(self) -> List[Path]:
        return [entry.path for entry in self.entries]

    @property
    def total_duration(self) -> float:
        return sum(entry.duration for entry in self.entries)


# ==================== Signal containers ====================


def _as_float_array(value: Any, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


class AudioClip(BaseModel):
    """Mono sample sequence plus sample rate."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray
    sample_rate: int = Field(gt=0)

    @field_validator("samples", mode="before")
    @classmethod
    def validate_samples(cls, v: Any) -> np.ndarray:
        arr = _as_float_array(v, 1, "samples")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        return arr

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


class ComplexSpectrogram(BaseModel):
    """Magnitude and phase planes of an STFT, shape [n_bins x n_frames]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    magnitude: np.ndarray
    phase: np.ndarray
    n_fft: int = Field(gt=0)
    hop: int = Field(gt=0)
    sample_rate: int = Field(gt=0)

    @field_validator("magnitude", "phase", mode="before")
    @classmethod
    def validate_planes(cls, v: Any) -> np.ndarray:
        return _as_float_array(v, 2, "spectrogram plane")

    @model_validator(mode="after")
    def check_planes(self) -> "ComplexSpectrogram":
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude and phase shapes differ")
        if self.magnitude.shape[0] != self.n_fft // 2 + 1:
            raise ValueError(
                f"expected {self.n_fft // 2 + 1} bins, got {self.magnitude.shape[0]}"
            )
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be nonnegative")
        return self

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]

    @property
    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


class MelFilterbank(BaseModel):
    """Triangular mel filterbank M of shape [n_mels x n_bins]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: np.ndarray
    edges_hz: np.ndarray
    f_min: float = 0.0
    f_max: float = 11025.0
    n_fft: int = 2048
    sample_rate: int = 22050

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]

    @property
    def center_frequencies(self) -> np.ndarray:
        return self.edges_hz[1:-1]


class FeatureStack(BaseModel):
    """Four equally-shaped timbre channels plus the phase kept for resynthesis."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mel: np.ndarray
    mfcc: np.ndarray
    sdiff: np.ndarray
    senv: np.ndarray
    phase: np.ndarray
    gamma: float = 0.6
    eta: int = 15
    sample_rate: int = 22050

    @field_validator("mel", "mfcc", "sdiff", "senv", "phase", mode="before")
    @classmethod
    def validate_channel(cls, v: Any) -> np.ndarray:
        return _as_float_array(v, 2, "channel")

    @model_validator(mode="after")
    def check_shapes(self) -> "FeatureStack":
        shape = self.mel.shape
        for name in ("mfcc", "sdiff", "senv"):
            if getattr(self, name).shape != shape:
                raise ValueError(
                    f"channel {name} has shape {getattr(self, name).shape}, mel has {shape}"
                )
        if self.phase.shape[1] != shape[1]:
            raise ValueError("phase frame count differs from feature frame count")
        return self

    @property
    def n_frames(self) -> int:
        return self.mel.shape[1]

    @property
    def n_mels(self) -> int:
        return self.mel.shape[0]

    def channels(self, feature_set: FeatureSet = FeatureSet.ALL) -> np.ndarray:
        """Stack the selected channels into a [C x F x T] array."""
        return np.stack([getattr(self, name) for name in feature_set.channels])

    def to_dict(self) -> Dict[str, np.ndarray]:
        return {
            "mel": self.mel,
            "mfcc": self.mfcc,
            "sdiff": self.sdiff,
            "senv": self.senv,
            "phase": self.phase,
        }
