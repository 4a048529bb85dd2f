"""
Timbre Feature Extraction.
Four-channel timbre representation (mel-spectrogram, MFCC, spectral
difference, spectral envelope) and per-corpus channel normalization.
"""
import logging
from typing import Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.dsp import dct_freq, get_filterbank, idct_truncated, stft
from app.exceptions import DomainError, SampleRateError, ShapeError
from app.models import AudioClip, FeatureConfig, FeatureSet, FeatureStack, MelFilterbank

logger = logging.getLogger(__name__)

CHANNEL_ORDER: Tuple[str, ...] = FeatureSet.ALL.channels


def power_compress(mag: np.ndarray, gamma: float) -> np.ndarray:
    """Elementwise mag ** gamma."""
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}", gamma=gamma)
    arr = np.asarray(mag, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("magnitude must be nonnegative")
    return np.power(arr, gamma)


def mel_spectrogram(power_spec: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """X_bar = M |X|^gamma."""
    arr = np.asarray(power_spec, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != fb.n_bins:
        raise ShapeError(
            f"power spectrogram has shape {arr.shape}; filterbank expects {fb.n_bins} bins"
        )
    return fb.weights @ arr


def spectral_difference(mel: np.ndarray) -> np.ndarray:
    """ReLU of the frame-to-frame increase; the last column is zero."""
    arr = np.asarray(mel, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise DomainError("spectral difference needs a [F x T] matrix with T >= 1")
    out = np.zeros_like(arr)
    out[:, :-1] = np.maximum(np.diff(arr, axis=1), 0.0)
    return out


def spectral_envelope(mel: np.ndarray, eta: int = 15) -> np.ndarray:
    """Cepstrally smoothed spectrum keeping coefficients 0..eta."""
    return idct_truncated(dct_freq(mel), eta)


def filterbank_for(config: FeatureConfig) -> MelFilterbank:
    return get_filterbank(
        config.n_fft, config.sample_rate, config.n_mels, config.f_min, config.f_max
    )


def stack_from_mel(mel: np.ndarray, phase: np.ndarray, config: FeatureConfig) -> FeatureStack:
    """Derive the three dependent channels from a mel-spectrogram."""
    return FeatureStack(
        mel=mel,
        mfcc=dct_freq(mel),
        sdiff=spectral_difference(mel),
        senv=spectral_envelope(mel, config.eta),
        phase=phase,
        gamma=config.gamma,
        eta=config.eta,
        sample_rate=config.sample_rate,
    )


def extract_stack(clip: AudioClip, config: Optional[FeatureConfig] = None) -> FeatureStack:
    """
    Compute the four-channel timbre representation of a clip.
    stft -> power_compress -> mel_spectrogram, then MFCC, spectral
    difference and envelope from the mel channel; the STFT phase is kept.
    """
    config = config or FeatureConfig()
    if clip.sample_rate != config.sample_rate:
        raise SampleRateError(
            f"clip is at {clip.sample_rate} Hz; resample to {config.sample_rate} Hz before extraction",
            sample_rate=clip.sample_rate,
            expected=config.sample_rate,
        )
    spectrogram = stft(clip, config.window)
    power = power_compress(spectrogram.magnitude, config.gamma)
    mel = mel_spectrogram(power, filterbank_for(config))
    return stack_from_mel(mel, spectrogram.phase, config)


def coherence_errors(stack: FeatureStack) -> Tuple[float, float, float]:
    """Max absolute deviation of each derived channel from its closed form."""
    return (
        float(np.max(np.abs(stack.mfcc - dct_freq(stack.mel)), initial=0.0)),
        float(np.max(np.abs(stack.sdiff - spectral_difference(stack.mel)), initial=0.0)),
        float(np.max(np.abs(stack.senv - spectral_envelope(stack.mel, stack.eta)), initial=0.0)),
    )


def is_coherent(stack: FeatureStack, atol: float = 1e-6, rtol: float = 0.0) -> bool:
    """Check the intrinsic channel identities, with tolerance relative to channel magnitude."""
    scales = (
        np.max(np.abs(stack.mfcc), initial=0.0),
        np.max(np.abs(stack.sdiff), initial=0.0),
        np.max(np.abs(stack.senv), initial=0.0),
    )
    return all(
        err <= atol + rtol * scale for err, scale in zip(coherence_errors(stack), scales)
    )


# ==================== Channel normalization ====================


class ChannelStats(BaseModel):
    """Per-channel affine normalization fitted on a training corpus."""

    mean: List[float] = Field(min_length=4, max_length=4)
    std: List[float] = Field(min_length=4, max_length=4)

    @model_validator(mode="after")
    def check_std(self) -> "ChannelStats":
        if any(s <= 0 for s in self.std):
            raise ValueError("channel std must be positive")
        return self

    @classmethod
    def identity(cls) -> "ChannelStats":
        return cls(mean=[0.0] * 4, std=[1.0] * 4)

    @classmethod
    def fit(cls, stacks: Iterable[FeatureStack], min_std: float = 1e-6) -> "ChannelStats":
        """Mean and std of every channel over all frames of all stacks."""
        totals = np.zeros(4)
        squares = np.zeros(4)
        count = 0
        for stack in stacks:
            for i, name in enumerate(CHANNEL_ORDER):
                values = getattr(stack, name)
                totals[i] += values.sum()
                squares[i] += np.square(values).sum()
            count += stack.mel.size
        if count == 0:
            raise DomainError("cannot fit channel statistics on an empty corpus")
        mean = totals / count
        std = np.sqrt(np.maximum(squares / count - mean ** 2, 0.0))
        std = np.maximum(std, min_std)
        # stored as float32 values so checkpoints reproduce them exactly
        return cls(
            mean=[float(v) for v in mean.astype(np.float32)],
            std=[float(v) for v in std.astype(np.float32)],
        )

    def affine(self, feature_set: FeatureSet = FeatureSet.ALL) -> Tuple[np.ndarray, np.ndarray]:
        """(mean, std) arrays shaped [C, 1, 1] for the selected channels."""
        index = [CHANNEL_ORDER.index(name) for name in feature_set.channels]
        mean = np.asarray(self.mean, dtype=np.float32)[index][:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[index][:, None, None]
        return mean, std

    def normalize(self, channels: np.ndarray, feature_set: FeatureSet = FeatureSet.ALL) -> np.ndarray:
        mean, std = self.affine(feature_set)
        return ((channels - mean) / std).astype(np.float32)

    def denormalize(self, channels: np.ndarray, feature_set: FeatureSet = FeatureSet.ALL) -> np.ndarray:
        mean, std = self.affine(feature_set)
        return np.asarray(channels, dtype=np.float64) * std + mean
