"""
Timbre Losses.
Relativistic least-squares adversarial loss, latent reconstruction losses,
self-reconstruction and the intrinsic consistency loss between channels.
"""
from typing import Dict, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict

from app.dsp import dct_matrix, envelope_matrix
from app.exceptions import ShapeError
from app.models import FeatureSet, LossReport, LossWeights


class IntrinsicTerms(BaseModel):
    """Per-relation intrinsic consistency terms and their weighted sum."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mfcc: torch.Tensor
    delta: torch.Tensor
    env: torch.Tensor
    total: torch.Tensor


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _mean_abs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


# ==================== Adversarial ====================


def ragan_d(q_this: torch.Tensor, mean_other: torch.Tensor) -> torch.Tensor:
    """Relativistic-average discriminator output sigma(Q(a) - mean Q(other))."""
    return torch.sigmoid(q_this - mean_other)


def adversarial_losses(q_real: torch.Tensor, q_fake: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Relativistic average least-squares losses for one domain.
    Returns (gen_loss, disc_loss).
    """
    if q_real.numel() == 0 or q_fake.numel() == 0:
        raise ShapeError("adversarial loss needs non-empty score maps")
    rel_real = q_real - q_fake.mean()
    rel_fake = q_fake - q_real.mean()
    disc_loss = ((rel_real - 1.0) ** 2).mean() + (rel_fake ** 2).mean()
    gen_loss = ((rel_fake - 1.0) ** 2).mean() + (rel_real ** 2).mean()
    return gen_loss, disc_loss


# ==================== Latent and reconstruction ====================


def content_loss(c_before: torch.Tensor, c_after: torch.Tensor) -> torch.Tensor:
    _check_same_shape(c_before, c_after, "content codes")
    return _mean_abs(c_before, c_after)


def style_loss(z_sampled: torch.Tensor, s_recovered: torch.Tensor) -> torch.Tensor:
    if z_sampled.dim() == 1 and s_recovered.dim() == 2 and s_recovered.shape[0] == 1:
        z_sampled = z_sampled.unsqueeze(0)
    _check_same_shape(z_sampled, s_recovered, "style codes")
    return _mean_abs(z_sampled, s_recovered)


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, x_hat, "reconstruction")
    return _mean_abs(x, x_hat)


# ==================== Intrinsic consistency ====================


def _linear_map(matrix, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(matrix, dtype=like.dtype, device=like.device)


def intrinsic_consistency_loss(
    u: torch.Tensor,
    weights: LossWeights = LossWeights(),
    feature_set: FeatureSet = FeatureSet.ALL,
    eta: int = 15,
) -> IntrinsicTerms:
    """
    Penalize derived channels that disagree with their closed form computed
    from the mel channel. `u` is [C, F, T] or [N, C, F, T] in feature units.
    Terms whose channel is absent from the feature set are zero.
    """
    if u.dim() == 3:
        u = u.unsqueeze(0)
    if u.dim() != 4 or u.shape[1] != feature_set.n_channels:
        raise ShapeError(
            f"expected [N, {feature_set.n_channels}, F, T] features, got {tuple(u.shape)}"
        )
    zero = u.new_zeros(())
    mel = u[:, 0]
    n_bands = mel.shape[1]

    mfcc_term = zero
    delta_term = zero
    env_term = zero
    if feature_set.n_channels >= 2:
        mfcc_term = _mean_abs(u[:, 1], torch.matmul(_linear_map(dct_matrix(n_bands), u), mel))
    if feature_set.n_channels == 4:
        rise = F.pad(torch.relu(mel[..., 1:] - mel[..., :-1]), (0, 1))
        delta_term = _mean_abs(u[:, 2], rise)
        envelope = torch.matmul(_linear_map(envelope_matrix(n_bands, eta), u), mel)
        env_term = _mean_abs(u[:, 3], envelope)

    total = (
        weights.lambda_mfcc * mfcc_term
        + weights.lambda_delta * delta_term
        + weights.lambda_env * env_term
    )
    return IntrinsicTerms(mfcc=mfcc_term, delta=delta_term, env=env_term, total=total)


# ==================== Objectives ====================


def generator_objective(terms: Dict[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    """adv + lambda_c content + lambda_s style + lambda_r recon + intrinsic total."""
    return (
        terms["adv_g"]
        + w.lambda_c * terms["content"]
        + w.lambda_s * terms["style"]
        + w.lambda_r * terms["recon"]
        + w.lambda_mfcc * terms["ic_mfcc"]
        + w.lambda_delta * terms["ic_delta"]
        + w.lambda_env * terms["ic_env"]
    )


def total_objective(parts: LossReport, w: LossWeights) -> float:
    """Weighted generator-side sum of a loss report; the adversarial weight is 1."""
    return (
        parts.adv_g
        + w.lambda_c * parts.content
        + w.lambda_s * parts.style
        + w.lambda_r * parts.recon
        + parts.ic_total(w)
    )
