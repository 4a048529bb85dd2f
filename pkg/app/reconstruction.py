"""
Timbre Signal Reconstruction.
Mel-spectrogram inversion by nonnegative least squares, gamma inversion,
reuse of the input phase and ISTFT.
"""
import logging
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.dsp import istft
from app.exceptions import DomainError, NonFiniteError, ReconstructionError, ShapeError
from app.metrics import metrics_collector
from app.models import AudioClip, ComplexSpectrogram, MelFilterbank, NnlsConfig, WindowSpec

logger = logging.getLogger(__name__)

# relative slack when asserting monotone objective values
MONOTONE_RTOL = 1e-12


class NnlsResult(BaseModel):
    """Outcome of one NNLS solve."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    solution: np.ndarray
    objective_history: List[float] = Field(default_factory=list)
    iterations: int = 0
    relative_residual: float = 0.0
    converged: bool = False


def spectral_norm_squared(basis: np.ndarray, n_iter: int = 100) -> float:
    """Largest eigenvalue of M^T M by power iteration from a fixed start."""
    vec = np.ones(basis.shape[1]) / np.sqrt(basis.shape[1])
    value = 0.0
    for _ in range(n_iter):
        nxt = basis.T @ (basis @ vec)
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 0.0
        vec = nxt / norm
        value = norm
    return float(value)


def solve_nnls(target: np.ndarray, basis: np.ndarray, cfg: Optional[NnlsConfig] = None) -> NnlsResult:
    """
    argmin_X ||Y - M X||^2 subject to X >= 0, solved column-wise in parallel by
    projected gradient with step 1 / ||M^T M||_2. The objective is checked to
    be nonincreasing at every iteration.
    """
    cfg = cfg or NnlsConfig()
    Y = np.asarray(target, dtype=np.float64)
    M = np.asarray(basis, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if M.ndim != 2 or Y.shape[0] != M.shape[0]:
        raise ShapeError(f"target rows {Y.shape[0]} do not match basis shape {M.shape}")
    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(M))):
        raise NonFiniteError("NNLS inputs contain non-finite values")

    Y = np.maximum(Y, 0.0)
    target_norm = np.linalg.norm(Y)
    if target_norm == 0.0:
        return NnlsResult(solution=np.zeros((M.shape[1], Y.shape[1])), converged=True)

    lipschitz = spectral_norm_squared(M)
    if lipschitz == 0.0:
        raise DomainError("basis matrix is zero; NNLS is undefined")
    step = 1.0 / lipschitz

    X = np.maximum(np.linalg.pinv(M) @ Y, 0.0)
    residual = Y - M @ X
    objective = float(np.sum(residual ** 2))
    history = [objective]
    relative = np.sqrt(objective) / target_norm
    iterations = 0

    while relative >= cfg.tol and iterations < cfg.max_iters:
        X = np.maximum(X + step * (M.T @ residual), 0.0)
        residual = Y - M @ X
        value = float(np.sum(residual ** 2))
        if value > objective * (1.0 + MONOTONE_RTOL):
            raise ReconstructionError(
                "NNLS objective increased",
                iteration=iterations,
                previous=objective,
                current=value,
            )
        objective = value
        history.append(objective)
        relative = np.sqrt(objective) / target_norm
        iterations += 1

    converged = bool(relative < cfg.tol)
    if not converged:
        logger.debug(
            f"NNLS stopped after {iterations} iterations at relative residual {relative:.3e}"
        )
    return NnlsResult(
        solution=X,
        objective_history=history,
        iterations=iterations,
        relative_residual=float(relative),
        converged=converged,
    )


def nnls_invert(mel: np.ndarray, fb: MelFilterbank, cfg: Optional[NnlsConfig] = None) -> np.ndarray:
    """Recover the nonnegative linear-frequency power spectrogram behind a mel-spectrogram."""
    result = solve_nnls(mel, fb.weights, cfg)
    metrics_collector.record_nnls(result.iterations, result.relative_residual)
    return result.solution


def degamma(power_spec: np.ndarray, gamma: float = 0.6) -> np.ndarray:
    """Elementwise power 1 / gamma."""
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}", gamma=gamma)
    arr = np.asarray(power_spec, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("power spectrogram must be nonnegative")
    return np.power(arr, 1.0 / gamma)


def match_phase(phase: np.ndarray, n_frames: int) -> np.ndarray:
    """Center-crop a phase plane to n_frames."""
    have = phase.shape[1]
    if have == n_frames:
        return phase
    if have < n_frames:
        raise ReconstructionError(
            f"phase has {have} frames but the mel-spectrogram has {n_frames}",
            phase_frames=have,
            mel_frames=n_frames,
        )
    start = (have - n_frames) // 2
    logger.warning(f"Center-cropping phase from {have} to {n_frames} frames")
    return phase[:, start:start + n_frames]


def resynthesize(
    mel: np.ndarray,
    phase: np.ndarray,
    fb: MelFilterbank,
    cfg: Optional[NnlsConfig] = None,
    win: Optional[WindowSpec] = None,
    gamma: float = 0.6,
) -> AudioClip:
    """NNLS -> degamma -> X_hat * exp(j Phi) -> ISTFT."""
    win = win or WindowSpec(size=fb.n_fft, hop=256)
    mel = np.asarray(mel, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] != fb.n_mels:
        raise ShapeError(f"mel-spectrogram shape {mel.shape} does not match {fb.n_mels} filters")
    if phase.ndim != 2 or phase.shape[0] != win.size // 2 + 1:
        raise ShapeError(f"phase shape {phase.shape} does not match n_fft {win.size}")
    phase = match_phase(phase, mel.shape[1])

    power = nnls_invert(np.maximum(mel, 0.0), fb, cfg)
    magnitude = degamma(power, gamma)
    spectrogram = ComplexSpectrogram(
        magnitude=magnitude,
        phase=phase,
        n_fft=win.size,
        hop=win.hop,
        sample_rate=fb.sample_rate,
    )
    return istft(spectrogram, win)
