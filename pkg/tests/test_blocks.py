"""Tests for convolution, AdaIN and the translator building blocks."""
import pytest
import torch
import torch.nn.functional as F
from torch.autograd import gradcheck

from app.blocks import (
    AdaINResBlock,
    Conv2dBlock,
    MLP,
    ResBlock,
    UpsampleBlock,
    adaptive_instance_norm,
    backward,
    conv2d,
)
from app.exceptions import ShapeError


def naive_conv(x, w, b, stride, pad):
    x = F.pad(x.unsqueeze(0), (pad,) * 4, mode="reflect")[0]
    c_out, _, k, _ = w.shape
    h = (x.shape[1] - k) // stride + 1
    width = (x.shape[2] - k) // stride + 1
    out = torch.zeros(c_out, h, width, dtype=x.dtype)
    for o in range(c_out):
        for i in range(h):
            for j in range(width):
                window = x[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = (window * w[o]).sum() + b[o]
    return out


class TestConv2d:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_naive(self, stride, pad):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(2, 6, 7, generator=gen, dtype=torch.float64)
        w = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64)
        b = torch.randn(3, generator=gen, dtype=torch.float64)
        got = conv2d(x, w, b, stride=stride, pad=pad)
        torch.testing.assert_close(got, naive_conv(x, w, b, stride, pad))

    def test_output_size(self):
        out = conv2d(torch.zeros(1, 3, 16, 32), torch.zeros(5, 3, 4, 4), stride=2, pad=1)
        assert out.shape == (1, 5, 8, 16)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(torch.zeros(2, 8, 8), torch.zeros(1, 3, 3, 3))

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(1)
        x = torch.randn(1, 2, 6, 6, generator=gen, dtype=torch.float64, requires_grad=True)
        w = torch.randn(2, 2, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda a, b: conv2d(a, b, stride=2, pad=1), (x, w))


class TestAdaIN:
    def test_unit_affine_standardizes(self):
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64) * 4 + 2
        out = adaptive_instance_norm(x, torch.ones(2, 3, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))
        torch.testing.assert_close(out.mean(dim=(2, 3)), torch.zeros(2, 3, dtype=torch.float64))
        assert torch.allclose(out.var(dim=(2, 3), unbiased=False), torch.ones(2, 3, dtype=torch.float64), atol=1e-4)

    def test_affine_applied(self):
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        out = adaptive_instance_norm(x, torch.tensor([[2.0, 1.0]], dtype=torch.float64), torch.tensor([[5.0, 0.0]], dtype=torch.float64))
        assert out[0, 0].mean().item() == pytest.approx(5.0)

    def test_parameter_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adaptive_instance_norm(torch.zeros(1, 3, 4, 4), torch.ones(2), torch.zeros(3))

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(2)
        args = (
            torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True),
            torch.randn(1, 2, generator=gen, dtype=torch.float64, requires_grad=True),
            torch.randn(1, 2, generator=gen, dtype=torch.float64, requires_grad=True),
        )
        assert gradcheck(adaptive_instance_norm, args)


class TestBackward:
    def test_populates_grad(self):
        p = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
        backward((p ** 2).sum())
        torch.testing.assert_close(p.grad, torch.tensor([2.0, 4.0]))

    def test_requires_scalar(self):
        p = torch.nn.Parameter(torch.ones(2))
        with pytest.raises(ShapeError):
            backward(p * 2)


class TestModules:
    def test_res_block_preserves_shape(self):
        assert ResBlock(4)(torch.zeros(1, 4, 8, 8)).shape == (1, 4, 8, 8)

    def test_upsample_doubles(self):
        assert UpsampleBlock(8, 4)(torch.zeros(1, 8, 4, 6)).shape == (1, 4, 8, 12)

    def test_mlp_shape(self):
        assert MLP(8, 20, 16)(torch.zeros(3, 8)).shape == (3, 20)

    def test_unknown_options(self):
        with pytest.raises(ValueError):
            Conv2dBlock(1, 1, 3, norm="batch")
        with pytest.raises(ValueError):
            Conv2dBlock(1, 1, 3, activation="tanh")

    def test_adain_block_gradcheck(self):
        torch.manual_seed(3)
        block = AdaINResBlock(2).double()
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        params = [torch.randn(1, 2, dtype=torch.float64, requires_grad=True) for _ in range(4)]
        assert gradcheck(lambda a, *p: block(a, p), (x, *params))

    def test_init_is_kaiming_scaled(self):
        torch.manual_seed(0)
        block = Conv2dBlock(64, 64, 3)
        expected = (2.0 / (64 * 9)) ** 0.5
        assert block.weight.std().item() == pytest.approx(expected, rel=0.1)
        assert torch.all(block.bias == 0)
