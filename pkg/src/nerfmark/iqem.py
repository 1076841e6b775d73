"""Residual conv encoder/decoder that restores rendered views.

Six conv stages encode the input (stages 3 and 5 halve the resolution);
six transposed-conv stages decode, each adding the encoder activation of
matching shape before its nonlinearity.  The decoder output is added to the
input image, so a model with zero weights is the identity map.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Rng, ShapeError, Tensor
from .optim import Adam

WIDTHS = (32, 64, 64, 128, 128, 128)
DOWNSAMPLE_AT = (2, 4)  # zero-based encoder stage indices with stride 2


class IqemModel(nn.Module):
    def __init__(self, channels: int = 3, widths: Sequence[int] = WIDTHS):
        super().__init__()
        if len(widths) != 6:
            raise ValueError("IQEM uses exactly six encoder stages")
        ins = [channels, *widths[:-1]]
        self.encoder = nn.ModuleList(
            nn.Conv2d(a, b, 3, stride=2 if k in DOWNSAMPLE_AT else 1, padding=1)
            for k, (a, b) in enumerate(zip(ins, widths))
        )
        # decoder stage k inverts encoder stage k, run from k=5 down to 0
        self.decoder = nn.ModuleList(
            nn.ConvTranspose2d(
                b, a, 3,
                stride=2 if k in DOWNSAMPLE_AT else 1,
                padding=1,
                output_padding=1 if k in DOWNSAMPLE_AT else 0,
            )
            for k, (a, b) in enumerate(zip(ins, widths))
        )

    def forward(self, image: Tensor) -> Tensor:
        if image.dim() != 4 or image.shape[-1] % 4 or image.shape[-2] % 4:
            raise ShapeError(
                f"enhance: expected (B, C, H, W) with H, W divisible by 4, got {tuple(image.shape)}"
            )
        skips = []
        h = image
        for conv in self.encoder:
            h = F.relu(conv(h))
            skips.append(h)
        # skips[k] is the output of encoder stage k; decoder stage k lands on
        # the shape of encoder stage k's input, i.e. skips[k - 1]
        for k in reversed(range(1, 6)):
            h = F.relu(self.decoder[k](h) + skips[k - 1])
        return image + self.decoder[0](h)


def init_iqem(model: IqemModel, rng: Rng) -> IqemModel:
    """Kaiming init from ``rng``; the last decoder stage starts at zero."""
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.weight[0].numel()
            elif isinstance(mod, nn.ConvTranspose2d):
                fan_in = mod.weight.shape[0] * mod.weight[0, 0].numel()
            else:
                continue
            mod.weight.copy_(rng.normal(mod.weight.shape, math.sqrt(2.0 / fan_in)))
            mod.bias.zero_()
        model.decoder[0].weight.zero_()
    return model


def enhance(model: IqemModel, image: Tensor) -> Tensor:
    """Enhance a (B, C, H, W) or (C, H, W) image; output is unclamped."""
    single = image.dim() == 3
    out = model(image[None] if single else image)
    return out[0] if single else out


def train_iqem(
    model: IqemModel,
    pairs: Sequence[tuple[Tensor, Tensor]],
    steps: int,
    rng: Rng,
    lr: float = 1e-4,
    batch: int = 2,
) -> list[float]:
    """Fit ``enhance(rendered) ~ watermarked`` by per-pixel MSE."""
    if not pairs:
        raise ValueError("train_iqem: no (rendered, watermarked) pairs")
    for rendered, target in pairs:
        if rendered.shape != target.shape:
            raise ShapeError(
                f"train_iqem: pair shapes {tuple(rendered.shape)} and {tuple(target.shape)} differ"
            )
    inputs = torch.stack([p[0] for p in pairs])
    targets = torch.stack([p[1] for p in pairs])
    opt = Adam(model, lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(pairs), batch))
        loss = ((model(inputs[idx]) - targets[idx]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
