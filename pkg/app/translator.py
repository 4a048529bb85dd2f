"""
Timbre Translator.
Bilateral content/style translation system: per-domain encoders,
generators and discriminators, plus clip-level transfer over feature stacks.
"""
import logging
from typing import Dict, Iterator, List, Sequence

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict

from app.blocks import AdaINResBlock, Conv2dBlock, MLP, ResBlock, UpsampleBlock
from app.exceptions import DomainError, ShapeError
from app.features import ChannelStats, stack_from_mel
from app.models import Direction, Domain, FeatureConfig, FeatureStack, NetworkConfig

logger = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 16  # four stride-2 stages in style encoder and discriminator


class LatentCodes(BaseModel):
    """Content code c [N, 4d, H/4, W/4] and style code s [N, style_dim]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    content: torch.Tensor
    style: torch.Tensor


# ==================== Networks ====================


class ContentEncoder(nn.Module):
    """7x7 stem, two stride-2 downsamples, residual blocks with instance norm."""

    def __init__(self, in_dim: int, dim: int, n_res: int):
        super().__init__()
        layers: List[nn.Module] = [Conv2dBlock(in_dim, dim, 7, 1, 3, norm="in")]
        for _ in range(2):
            layers.append(Conv2dBlock(dim, dim * 2, 4, 2, 1, norm="in"))
            dim *= 2
        layers += [ResBlock(dim) for _ in range(n_res)]
        self.model = nn.Sequential(*layers)
        self.out_dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class StyleEncoder(nn.Module):
    """Four stride-2 stages, global average pooling, linear map to the style code."""

    def __init__(self, in_dim: int, dim: int, style_dim: int):
        super().__init__()
        layers: List[nn.Module] = [Conv2dBlock(in_dim, dim, 7, 1, 3)]
        for _ in range(2):
            layers.append(Conv2dBlock(dim, dim * 2, 4, 2, 1))
            dim *= 2
        for _ in range(2):
            layers.append(Conv2dBlock(dim, dim, 4, 2, 1))
        self.model = nn.Sequential(*layers)
        self.fc = nn.Linear(dim, style_dim)
        nn.init.kaiming_normal_(self.fc.weight, mode="fan_in", nonlinearity="linear")
        nn.init.zeros_(self.fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self.model(x)
        return self.fc(features.mean(dim=(2, 3)))


class Decoder(nn.Module):
    """AdaIN residual blocks, two upsampling stages and a linear 7x7 output conv."""

    def __init__(self, dim: int, out_dim: int, style_dim: int, mlp_dim: int, n_res: int):
        super().__init__()
        self.res_blocks = nn.ModuleList([AdaINResBlock(dim) for _ in range(n_res)])
        self.n_adain_params = 2 * dim * AdaINResBlock.n_adain * n_res
        self.mlp = MLP(style_dim, max(self.n_adain_params, 1), mlp_dim)
        ups: List[nn.Module] = []
        for _ in range(2):
            ups.append(UpsampleBlock(dim, dim // 2))
            dim //= 2
        self.upsample = nn.Sequential(*ups)
        self.output = Conv2dBlock(dim, out_dim, 7, 1, 3, norm="none", activation="none")

    def adain_params(self, style: torch.Tensor) -> List[List[torch.Tensor]]:
        """Split the MLP output into (scale, bias) pairs per AdaIN layer; scale centred on 1."""
        flat = self.mlp(style)
        params: List[List[torch.Tensor]] = []
        offset = 0
        for block in self.res_blocks:
            chunk: List[torch.Tensor] = []
            for _ in range(block.n_adain):
                scale = 1.0 + flat[:, offset:offset + block.dim]
                bias = flat[:, offset + block.dim:offset + 2 * block.dim]
                chunk += [scale, bias]
                offset += 2 * block.dim
            params.append(chunk)
        return params

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        x = content
        for block, params in zip(self.res_blocks, self.adain_params(style)):
            x = block(x, params)
        return self.output(self.upsample(x))


class PatchDiscriminator(nn.Module):
    """Four stride-2 LeakyReLU stages and a 1x1 projection to the score map Q."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        layers: List[nn.Module] = []
        for _ in range(4):
            layers.append(Conv2dBlock(in_dim, dim, 4, 2, 1, activation="lrelu"))
            in_dim, dim = dim, dim * 2
        layers.append(Conv2dBlock(in_dim, 1, 1, 1, 0, activation="none"))
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class DomainModels(nn.Module):
    """E, G and D of one domain."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        dim = config.base_channels
        self.content_encoder = ContentEncoder(config.in_channels, dim, config.n_res)
        self.style_encoder = StyleEncoder(config.in_channels, dim, config.style_dim)
        self.decoder = Decoder(
            self.content_encoder.out_dim,
            config.in_channels,
            config.style_dim,
            config.mlp_dim,
            config.n_res,
        )
        self.discriminator = PatchDiscriminator(config.in_channels, dim)

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.content_encoder.parameters()
        yield from self.style_encoder.parameters()
        yield from self.decoder.parameters()


# ==================== Translator ====================


class Translator(nn.Module):
    """
    Bilateral translation system with disjoint parameters per domain.
    Inputs are normalized patches [C, F, T] or [N, C, F, T].
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.domains = nn.ModuleDict({d.value: DomainModels(config) for d in Domain})

    def models(self, domain: Domain) -> DomainModels:
        return self.domains[Domain(domain).value]

    def generator_parameters(self) -> List[nn.Parameter]:
        return [p for d in Domain for p in self.models(d).generator_parameters()]

    def discriminator_parameters(self) -> List[nn.Parameter]:
        return [p for d in Domain for p in self.models(d).discriminator.parameters()]

    def _check_patch(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected [N, {self.config.in_channels}, F, T] patch, got {tuple(x.shape)}"
            )
        if x.shape[2] % DOWNSAMPLE_FACTOR or x.shape[3] % DOWNSAMPLE_FACTOR:
            raise ShapeError(
                f"patch sides must be multiples of {DOWNSAMPLE_FACTOR}, got {tuple(x.shape[2:])}"
            )
        return x

    def _check_style(self, style: torch.Tensor, batch: int) -> torch.Tensor:
        if style.dim() == 1:
            style = style.unsqueeze(0)
        if style.dim() != 2 or style.shape[1] != self.config.style_dim:
            raise ShapeError(
                f"style code must have {self.config.style_dim} entries, got {tuple(style.shape)}"
            )
        if style.shape[0] == 1 and batch > 1:
            style = style.expand(batch, -1)
        return style

    def encode(self, x: torch.Tensor, domain: Domain) -> LatentCodes:
        x = self._check_patch(x)
        models = self.models(domain)
        return LatentCodes(content=models.content_encoder(x), style=models.style_encoder(x))

    def decode(self, content: torch.Tensor, style: torch.Tensor, domain: Domain) -> torch.Tensor:
        if content.dim() == 3:
            content = content.unsqueeze(0)
        expected = self.models(domain).content_encoder.out_dim
        if content.dim() != 4 or content.shape[1] != expected:
            raise ShapeError(f"content code must have {expected} channels, got {tuple(content.shape)}")
        style = self._check_style(style, content.shape[0])
        return self.models(domain).decoder(content, style)

    def discriminate(self, x: torch.Tensor, domain: Domain) -> torch.Tensor:
        return self.models(domain).discriminator(self._check_patch(x))

    def translate(self, x: torch.Tensor, source: Domain, z: torch.Tensor) -> torch.Tensor:
        """Content from the source encoder, decoded with z by the other domain's generator."""
        source = Domain(source)
        codes = self.encode(x, source)
        return self.decode(codes.content, z, source.other)

    def interpolate_style(
        self,
        x: torch.Tensor,
        source: Domain,
        z: torch.Tensor,
        dim: int,
        values: Sequence[float],
    ) -> List[torch.Tensor]:
        """Translate with z[dim] replaced by each value in turn."""
        codes = sweep_style(z, dim, values, self.config.style_dim)
        source = Domain(source)
        content = self.encode(x, source).content
        return [self.decode(content, swept, source.other) for swept in codes]


def sweep_style(z: torch.Tensor, dim: int, values: Sequence[float], style_dim: int) -> List[torch.Tensor]:
    """Copies of z with entry `dim` set to each value."""
    if not 0 <= dim < style_dim:
        raise DomainError(f"style dimension {dim} outside [0, {style_dim - 1}]", dim=dim)
    if not all(np.isfinite(v) for v in values):
        raise DomainError("interpolation values must be finite")
    codes = []
    for value in values:
        swept = z.detach().clone()
        swept[..., dim] = float(value)
        codes.append(swept)
    return codes


def build_translator(config: NetworkConfig, seed: int = 0) -> Translator:
    """Construct a translator with initialization drawn from `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        translator = Translator(config)
    return translator


# ==================== Clip-level transfer ====================


def patch_starts(n_frames: int, patch_frames: int) -> List[int]:
    """Consecutive patch offsets covering n_frames; the last patch is aligned to the end."""
    if n_frames <= patch_frames:
        return [0]
    starts = list(range(0, n_frames - patch_frames + 1, patch_frames))
    if starts[-1] + patch_frames < n_frames:
        starts.append(n_frames - patch_frames)
    return starts


@torch.no_grad()
def transfer_stack(
    translator: Translator,
    stack: FeatureStack,
    direction: Direction,
    z: torch.Tensor,
    stats: Dict[Domain, ChannelStats],
    patch_frames: int,
    feature_config: FeatureConfig,
) -> FeatureStack:
    """
    Translate a whole clip with one style code: normalize patches with source
    statistics, translate, denormalize with target statistics and stitch.
    Channels outside the network's feature set are derived from the mel channel.
    """
    feature_set = translator.config.feature_set
    source, target = direction.source, direction.target
    channels = stack.channels(feature_set)
    n_frames = channels.shape[2]
    if n_frames < patch_frames:
        channels = np.pad(channels, ((0, 0), (0, 0), (0, patch_frames - n_frames)), mode="edge")

    dtype = next(translator.parameters()).dtype
    out = np.zeros_like(channels)
    for start in patch_starts(channels.shape[2], patch_frames):
        patch = stats[source].normalize(channels[:, :, start:start + patch_frames], feature_set)
        x = torch.from_numpy(patch).to(dtype)
        y = translator.translate(x, source, z.to(dtype))[0].numpy()
        out[:, :, start:start + patch_frames] = stats[target].denormalize(y, feature_set)

    out = out[:, :, :n_frames]
    result = stack_from_mel(out[0], stack.phase, feature_config)
    if feature_set.n_channels == 4:
        result = FeatureStack(
            mel=out[0], mfcc=out[1], sdiff=out[2], senv=out[3], phase=stack.phase,
            gamma=stack.gamma, eta=stack.eta, sample_rate=stack.sample_rate,
        )
    elif feature_set.n_channels == 2:
        result.mfcc = out[1]
    return result
