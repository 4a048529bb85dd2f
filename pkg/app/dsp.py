"""
Timbre DSP Core.
Windows, STFT/ISTFT, the DCT pair and the mel filterbank shared by
feature extraction and resynthesis.
"""
import logging
import warnings
from functools import lru_cache
from typing import Optional, Union

import librosa
import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from app.exceptions import DomainError, ReconstructionError, ShapeError
from app.models import AudioClip, ComplexSpectrogram, MelFilterbank, WindowSpec

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

MIN_WINDOW_SIZE = 4


# ==================== Mel scale ====================


def hz_to_mel(f: ArrayLike) -> ArrayLike:
    """mel = 2595 * log10(1 + f / 700)."""
    arr = np.asarray(f, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("frequency must be nonnegative", frequency=float(np.min(arr)))
    mel = librosa.hz_to_mel(arr, htk=True)
    return float(mel) if np.ndim(mel) == 0 else mel


def mel_to_hz(m: ArrayLike) -> ArrayLike:
    arr = np.asarray(m, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("mel value must be nonnegative", mel=float(np.min(arr)))
    hz = librosa.mel_to_hz(arr, htk=True)
    return float(hz) if np.ndim(hz) == 0 else hz


# ==================== Framing ====================


def make_window(spec: WindowSpec) -> np.ndarray:
    """Periodic Hann window of length spec.size."""
    if spec.size < MIN_WINDOW_SIZE:
        raise DomainError(
            f"window size {spec.size} is degenerate; at least {MIN_WINDOW_SIZE} samples required",
            size=spec.size,
        )
    return get_window(spec.shape.value, spec.size, fftbins=True).astype(np.float64)


def _resolve_window(spec: WindowSpec, window: Optional[np.ndarray]) -> np.ndarray:
    if window is None:
        return make_window(spec)
    h = np.asarray(window, dtype=np.float64)
    if h.shape != (spec.size,):
        raise ShapeError(f"window override must have {spec.size} samples, got {h.shape}")
    return h


def stft(
    clip: AudioClip,
    spec: WindowSpec,
    window: Optional[np.ndarray] = None,
) -> ComplexSpectrogram:
    """
    X[k, n] = sum_m x[m + nH] h[m] exp(-j 2 pi k m / N).
    Frames lie fully inside the signal; no centering or padding.
    """
    x = clip.samples
    if len(x) < spec.size:
        raise DomainError(
            f"clip has {len(x)} samples but one analysis window needs {spec.size}; "
            "zero-pad the clip to at least one window before analysis",
            samples=len(x),
            window=spec.size,
        )
    h = _resolve_window(spec, window)

    frames = sliding_window_view(x, spec.size)[:: spec.hop]
    spectrum = np.fft.rfft(frames * h, axis=1).T

    phase = np.angle(spectrum)
    phase[phase <= -np.pi] = np.pi  # keep phase in (-pi, pi]
    return ComplexSpectrogram(
        magnitude=np.abs(spectrum),
        phase=phase,
        n_fft=spec.size,
        hop=spec.hop,
        sample_rate=clip.sample_rate,
    )


def istft(
    spec: ComplexSpectrogram,
    win: WindowSpec,
    window: Optional[np.ndarray] = None,
) -> AudioClip:
    """
    Weighted overlap-add with squared-window normalization.

    Samples at either end that no window covers with nonzero weight are
    returned as zero; an uncovered sample between covered ones is an error.
    """
    if spec.n_fft != win.size or spec.hop != win.hop:
        raise ShapeError(
            f"spectrogram framing {spec.n_fft}/{spec.hop} does not match window {win.size}/{win.hop}"
        )
    h = _resolve_window(win, window)
    n_frames = spec.n_frames
    length = (n_frames - 1) * win.hop + win.size

    frames = np.fft.irfft(spec.complex, n=win.size, axis=0) * h[:, None]
    out = np.zeros(length)
    norm = np.zeros(length)
    h2 = h * h
    for n in range(n_frames):
        start = n * win.hop
        out[start:start + win.size] += frames[:, n]
        norm[start:start + win.size] += h2

    covered = norm > 0.0
    if not np.any(covered):
        raise ReconstructionError("window has no nonzero samples; normalization undefined")
    first = int(np.argmax(covered))
    last = length - int(np.argmax(covered[::-1])) - 1
    gaps = np.flatnonzero(~covered[first:last + 1])
    if gaps.size:
        raise ReconstructionError(
            "zero overlap-add normalization inside the signal",
            sample=int(first + gaps[0]),
        )

    samples = np.zeros(length)
    samples[covered] = out[covered] / norm[covered]
    return AudioClip(samples=samples, sample_rate=spec.sample_rate)


# ==================== Cepstral transforms ====================


def dct_freq(m: np.ndarray) -> np.ndarray:
    """C[q, n] = sum_f m[f, n] cos(pi / F * (f + 1/2) * q), per column."""
    arr = np.asarray(m, dtype=np.float64)
    return scipy.fft.dct(arr, type=2, axis=0) / 2.0


def idct_truncated(c: np.ndarray, eta: int) -> np.ndarray:
    """
    Inverse of dct_freq keeping cepstral coefficients 0..eta.
    With eta = F - 1 this is the exact inverse.
    """
    arr = np.asarray(c, dtype=np.float64)
    n_bands = arr.shape[0]
    if not 0 <= eta < n_bands:
        raise DomainError(f"cutoff index {eta} outside [0, {n_bands})", eta=eta, bands=n_bands)
    truncated = arr.copy()
    truncated[eta + 1:] = 0.0
    return scipy.fft.idct(2.0 * truncated, type=2, axis=0)


@lru_cache(maxsize=8)
def dct_matrix(n_bands: int) -> np.ndarray:
    """Matrix D with dct_freq(m) == D @ m."""
    q = np.arange(n_bands)[:, None]
    f = np.arange(n_bands)[None, :]
    basis = np.cos(np.pi / n_bands * (f + 0.5) * q)
    basis.setflags(write=False)
    return basis


@lru_cache(maxsize=8)
def inverse_dct_matrix(n_bands: int) -> np.ndarray:
    """Matrix D^-1 (DCT-III, half weight on q = 0, scale 2/F)."""
    weights = np.full(n_bands, 2.0 / n_bands)
    weights[0] = 1.0 / n_bands
    inverse = dct_matrix(n_bands).T * weights[None, :]
    inverse.setflags(write=False)
    return inverse


@lru_cache(maxsize=8)
def envelope_matrix(n_bands: int, eta: int) -> np.ndarray:
    """Matrix E with idct_truncated(dct_freq(m), eta) == E @ m."""
    if not 0 <= eta < n_bands:
        raise DomainError(f"cutoff index {eta} outside [0, {n_bands})", eta=eta, bands=n_bands)
    projection = inverse_dct_matrix(n_bands)[:, : eta + 1] @ dct_matrix(n_bands)[: eta + 1, :]
    projection.setflags(write=False)
    return projection


# ==================== Filterbank ====================


def make_mel_filterbank(
    n_fft: int,
    sr: int,
    n_mels: int = 256,
    f_min: float = 0.0,
    f_max: Optional[float] = None,
) -> MelFilterbank:
    """
    Triangular filters with n_mels + 2 edges equally spaced on the mel axis;
    filter i rises from edge i to edge i+1 and falls to edge i+2.
    Each row is peak-normalized to 1.
    """
    f_max = sr / 2.0 if f_max is None else float(f_max)
    if f_max > sr / 2.0:
        raise DomainError("f_max exceeds the Nyquist frequency", f_max=f_max, sample_rate=sr)
    if f_min < 0 or f_min >= f_max:
        raise DomainError("filterbank range must satisfy 0 <= f_min < f_max", f_min=f_min, f_max=f_max)

    edges = librosa.mel_frequencies(n_mels=n_mels + 2, fmin=f_min, fmax=f_max, htk=True)
    with warnings.catch_warnings():
        # empty filters are reported below with a DomainError
        warnings.simplefilter("ignore", UserWarning)
        weights = librosa.filters.mel(
            sr=sr,
            n_fft=n_fft,
            n_mels=n_mels,
            fmin=f_min,
            fmax=f_max,
            htk=True,
            norm=None,
            dtype=np.float64,
        )

    peaks = weights.max(axis=1)
    empty = np.flatnonzero(peaks <= 0.0)
    if empty.size:
        raise DomainError(
            f"{empty.size} mel filters receive no FFT bin at n_fft={n_fft}; "
            "use fewer filters or a longer window",
            first_empty=int(empty[0]),
        )
    weights = weights / peaks[:, None]
    return MelFilterbank(
        weights=weights,
        edges_hz=np.asarray(edges, dtype=np.float64),
        f_min=f_min,
        f_max=f_max,
        n_fft=n_fft,
        sample_rate=sr,
    )


@lru_cache(maxsize=4)
def get_filterbank(
    n_fft: int = 2048,
    sr: int = 22050,
    n_mels: int = 256,
    f_min: float = 0.0,
    f_max: float = 11025.0,
) -> MelFilterbank:
    """Cached filterbank for a configuration; callers must not mutate it."""
    fb = make_mel_filterbank(n_fft, sr, n_mels=n_mels, f_min=f_min, f_max=f_max)
    fb.weights.setflags(write=False)
    logger.debug(f"Built mel filterbank: {n_mels} filters, n_fft={n_fft}, sr={sr}")
    return fb
