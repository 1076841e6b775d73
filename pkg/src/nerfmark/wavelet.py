"""Single-level orthonormal Haar transform on NCHW batches.

Subbands are stacked along the channel axis in the order LL, LH, HL, HH,
each block ``C`` channels wide.  For a 2x2 pixel block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2        LH = (a - b + c - d) / 2
    HL = (a + b - c - d) / 2        HH = (a - b - c + d) / 2
"""

from __future__ import annotations

import torch

from .autodiff import ShapeError, Tensor


def dwt_haar(image: Tensor) -> Tensor:
    if image.dim() != 4:
        raise ShapeError(f"dwt_haar: expected (B, C, H, W), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"dwt_haar: spatial extent {h}x{w} must be even")
    a = image[..., 0::2, 0::2]
    b = image[..., 0::2, 1::2]
    c = image[..., 1::2, 0::2]
    d = image[..., 1::2, 1::2]
    return torch.cat(
        [
            (a + b + c + d) * 0.5,
            (a - b + c - d) * 0.5,
            (a + b - c - d) * 0.5,
            (a - b - c + d) * 0.5,
        ],
        dim=1,
    )


def iwt_haar(subbands: Tensor) -> Tensor:
    if subbands.dim() != 4 or subbands.shape[1] % 4:
        raise ShapeError(
            f"iwt_haar: expected (B, 4C, H, W) subbands, got {tuple(subbands.shape)}"
        )
    ll, lh, hl, hh = subbands.chunk(4, dim=1)
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    c = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    n, ch, h, w = ll.shape
    top = torch.stack([a, b], dim=-1).reshape(n, ch, h, 2 * w)
    bottom = torch.stack([c, d], dim=-1).reshape(n, ch, h, 2 * w)
    return torch.stack([top, bottom], dim=-2).reshape(n, ch, 2 * h, 2 * w)


def lowpass(image: Tensor) -> Tensor:
    """The LL block of ``dwt_haar(image)``."""
    return dwt_haar(image)[:, : image.shape[1]]
