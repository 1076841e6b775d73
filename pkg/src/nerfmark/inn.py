"""Invertible watermark network operating on Haar subbands.

Each coupling block carries three densely connected conv nets ``f``, ``r``
and ``y``.  Forward (hiding) direction, for cover branch ``I`` and watermark
branch ``M``::

    I' = I + f(M)
    M' = M * exp(s(r(I'))) + y(I')

with ``s`` the leaky rectifier followed by a clamp to ``[-clamp, clamp]``.
The inverse (revealing) direction undoes the two updates in reverse order,
so a stack of blocks is exactly invertible for any parameter values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Rng, ShapeError, Tensor
from .wavelet import dwt_haar, iwt_haar

LEAKY_SLOPE = 0.01


class DenseBlock(nn.Module):
    """Seven 3x3 convs; each layer sees the block input plus all earlier outputs."""

    def __init__(self, in_channels: int, out_channels: int, growth: int = 16, n_layers: int = 7):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels + i * growth, growth, 3, padding=1)
            for i in range(n_layers - 1)
        )
        self.out = nn.Conv2d(in_channels + (n_layers - 1) * growth, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(F.leaky_relu(conv(torch.cat(feats, 1)), LEAKY_SLOPE))
        return self.out(torch.cat(feats, 1))


class CouplingBlock(nn.Module):
    def __init__(self, cover_channels: int, mark_channels: int, growth: int = 16, clamp: float = 5.0):
        super().__init__()
        self.clamp = clamp
        self.f = DenseBlock(mark_channels, cover_channels, growth)
        self.r = DenseBlock(cover_channels, mark_channels, growth)
        self.y = DenseBlock(cover_channels, mark_channels, growth)

    def log_scale(self, cover: Tensor) -> Tensor:
        s = F.leaky_relu(self.r(cover), LEAKY_SLOPE)
        return torch.clamp(s, -self.clamp, self.clamp)

    def _check(self, a: Tensor, b: Tensor, op: str) -> None:
        if a.dim() != 4 or b.dim() != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(
                f"{op}: branch shapes {tuple(a.shape)} and {tuple(b.shape)} do not align"
            )

    def forward(self, cover: Tensor, mark: Tensor) -> tuple[Tensor, Tensor]:
        self._check(cover, mark, "coupling_forward")
        cover = cover + self.f(mark)
        mark = mark * torch.exp(self.log_scale(cover)) + self.y(cover)
        return cover, mark

    def inverse(self, cover: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
        self._check(cover, z, "coupling_inverse")
        z = (z - self.y(cover)) * torch.exp(-self.log_scale(cover))
        cover = cover - self.f(z)
        return cover, z


class CouplingStack(nn.Module):
    """Blocks shared by embedding (forward) and extraction (inverse)."""

    def __init__(self, channels: int = 3, n_blocks: int = 8, growth: int = 16, clamp: float = 5.0):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("CouplingStack needs at least one block")
        self.channels = channels
        width = 4 * channels
        self.blocks = nn.ModuleList(
            CouplingBlock(width, width, growth, clamp) for _ in range(n_blocks)
        )

    def forward(self, cover: Tensor, mark: Tensor) -> tuple[Tensor, Tensor]:
        for block in self.blocks:
            cover, mark = block(cover, mark)
        return cover, mark

    def inverse(self, cover: Tensor, z: Tensor) -> tuple[Tensor, Tensor]:
        for block in reversed(self.blocks):
            cover, z = block.inverse(cover, z)
        return cover, z


def init_stack(stack: nn.Module, rng: Rng, out_std: float = 0.0) -> nn.Module:
    """Kaiming-normal init for hidden convs from ``rng``.

    Output convs of every dense block get ``N(0, out_std^2)`` weights and zero
    bias; the default ``out_std=0`` makes the stack an exact identity.
    """
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    with torch.no_grad():
        for name, mod in stack.named_modules():
            if not isinstance(mod, DenseBlock):
                continue
            for conv in mod.convs:
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(rng.normal(conv.weight.shape, gain / math.sqrt(fan_in)))
                conv.bias.zero_()
            mod.out.weight.copy_(rng.normal(mod.out.weight.shape, out_std))
            mod.out.bias.zero_()
    return stack


@dataclass
class StegoBundle:
    stego: Tensor
    lost_info: Tensor


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.dim() != 4 or a.shape != b.shape:
        raise ShapeError(f"{op}: image shapes {tuple(a.shape)} and {tuple(b.shape)} must match")


def embed(cover: Tensor, watermark: Tensor, stack: CouplingStack) -> StegoBundle:
    """Hide ``watermark`` in ``cover``; both are (B, C, H, W) with even H, W.

    The stego image is left unclamped so the call stays differentiable;
    exporters quantize it.
    """
    _check_pair(cover, watermark, "embed")
    out_cover, out_mark = stack(dwt_haar(cover), dwt_haar(watermark))
    return StegoBundle(iwt_haar(out_cover), out_mark)


def extract(image: Tensor, z: Tensor, stack: CouplingStack) -> tuple[Tensor, Tensor]:
    """Run the blocks backwards from ``(dwt(image), z)``.

    Returns the recovered cover and the recovered watermark, both in the
    pixel domain.
    """
    sub = dwt_haar(image)
    if z.shape != sub.shape:
        raise ShapeError(
            f"extract: z has shape {tuple(z.shape)}, expected {tuple(sub.shape)}"
        )
    cover, mark = stack.inverse(sub, z)
    return iwt_haar(cover), iwt_haar(mark)


def sample_z(shape, rng: Rng) -> Tensor:
    return rng.normal(shape)
