"""
Timbre Network Blocks.
Differentiable building blocks of the translator on top of torch autograd:
reflection-padded convolution, instance/adaptive instance normalization,
residual blocks, up/down-sampling stages and the style MLP.
"""
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.exceptions import ShapeError

ADAIN_EPS = 1e-5


# ==================== Functional ops ====================


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected [C, H, W] or [N, C, H, W], got {tuple(x.shape)}")
    return x


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """Cross-correlation with reflection padding; out = floor((in + 2 pad - k) / stride) + 1."""
    squeeze = x.dim() == 3
    x = _batched(x)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}"
        )
    if pad > 0:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(x, weight, bias, stride=stride)
    return out.squeeze(0) if squeeze else out


def adaptive_instance_norm(
    x: torch.Tensor,
    scale: torch.Tensor,
    bias: torch.Tensor,
    eps: float = ADAIN_EPS,
) -> torch.Tensor:
    """Per-channel standardization over spatial dims followed by the affine (scale, bias)."""
    squeeze = x.dim() == 3
    x = _batched(x)
    n, c = x.shape[:2]
    if scale.shape[-1] != c or bias.shape[-1] != c or scale.dim() > 2 or bias.dim() > 2:
        raise ShapeError(f"AdaIN parameters must have {c} entries per sample")
    scale = scale.reshape(-1, c)
    bias = bias.reshape(-1, c)
    out = F.instance_norm(x, eps=eps)
    out = out * scale[:, :, None, None] + bias[:, :, None, None]
    return out.squeeze(0) if squeeze else out


def backward(loss: torch.Tensor) -> None:
    """Populate .grad of every parameter that contributed to a scalar loss."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


# ==================== Modules ====================


def init_weights(module: nn.Module) -> None:
    """Kaiming fan-in scaling for kernels, zero biases."""
    for name, param in module.named_parameters(recurse=False):
        if name == "weight" and param.dim() > 1:
            nn.init.kaiming_normal_(param, mode="fan_in", nonlinearity="relu")
        elif name == "bias":
            nn.init.zeros_(param)


class Conv2dBlock(nn.Module):
    """Reflection-padded convolution -> optional normalization -> activation."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
        norm: str = "none",
        activation: str = "relu",
    ):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(out_dim))
        init_weights(self)

        if norm == "in":
            self.norm: Optional[nn.Module] = nn.InstanceNorm2d(out_dim, eps=ADAIN_EPS)
        elif norm == "ln":
            self.norm = nn.GroupNorm(1, out_dim, eps=ADAIN_EPS)
        elif norm == "none":
            self.norm = None
        else:
            raise ValueError(f"unsupported normalization: {norm}")

        if activation == "relu":
            self.activation: Optional[nn.Module] = nn.ReLU()
        elif activation == "lrelu":
            self.activation = nn.LeakyReLU(0.2)
        elif activation == "none":
            self.activation = None
        else:
            raise ValueError(f"unsupported activation: {activation}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
        if self.norm is not None:
            x = self.norm(x)
        if self.activation is not None:
            x = self.activation(x)
        return x


class ResBlock(nn.Module):
    """Two 3x3 convolutions with instance norm and an identity skip."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = Conv2dBlock(dim, dim, 3, 1, 1, norm="in", activation="relu")
        self.conv2 = Conv2dBlock(dim, dim, 3, 1, 1, norm="in", activation="none")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.conv1(x))


class AdaINResBlock(nn.Module):
    """Residual block whose normalizations take their affine from the style code."""

    n_adain = 2

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.conv1 = Conv2dBlock(dim, dim, 3, 1, 1, norm="none", activation="none")
        self.conv2 = Conv2dBlock(dim, dim, 3, 1, 1, norm="none", activation="none")

    def forward(self, x: torch.Tensor, params: Sequence[torch.Tensor]) -> torch.Tensor:
        scale1, bias1, scale2, bias2 = params
        out = F.relu(adaptive_instance_norm(self.conv1(x), scale1, bias1))
        out = adaptive_instance_norm(self.conv2(out), scale2, bias2)
        return x + out


class UpsampleBlock(nn.Module):
    """Nearest-neighbour x2 upsampling followed by a 5x5 convolution."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = Conv2dBlock(in_dim, out_dim, 5, 1, 2, norm="ln", activation="relu")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(_batched(x), scale_factor=2, mode="nearest"))


class MLP(nn.Module):
    """Fully connected stack mapping the style code to AdaIN parameters."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int, n_layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        layers: List[nn.Module] = []
        for i in range(n_layers):
            linear = nn.Linear(dims[i], dims[i + 1])
            init_weights(linear)
            layers.append(linear)
            if i < n_layers - 1:
                layers.append(nn.ReLU())
        self.model = nn.Sequential(*layers)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.model(s)
