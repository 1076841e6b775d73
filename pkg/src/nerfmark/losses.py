"""Training objective for the coupling network and its phase schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .autodiff import ShapeError, Tensor
from .wavelet import lowpass

PRETRAIN, FULL = "pretrain", "full"


@dataclass(frozen=True)
class LossWeights:
    emb: float = 5.0
    lowf: float = 0.5
    ext: float = 1.0
    phase: str = FULL

    def __post_init__(self):
        if min(self.emb, self.lowf, self.ext) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.phase not in (PRETRAIN, FULL):
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def effective_lowf(self) -> float:
        return 0.0 if self.phase == PRETRAIN else self.lowf

    def at_step(self, step: int, boundary: int) -> "LossWeights":
        """Weights for ``step``: pretrain strictly before ``boundary``, full after."""
        phase = PRETRAIN if step < boundary else FULL
        return LossWeights(self.emb, self.lowf, self.ext, phase)


def _sq(a: Tensor, b: Tensor, op: str) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return ((a - b) ** 2).sum()


def loss_emb(stego: Tensor, cover: Tensor) -> Tensor:
    """Summed squared error between stego and cover over the whole batch."""
    return _sq(stego, cover, "loss_emb")


def loss_lowf(cover: Tensor, stego: Tensor) -> Tensor:
    """Summed squared error between the LL subbands of cover and stego."""
    return _sq(lowpass(cover), lowpass(stego), "loss_lowf")


def loss_ext(recovered: Tensor | Sequence[Tensor], watermark: Tensor) -> Tensor:
    """Summed squared extraction error, averaged over z draws.

    ``recovered`` is one tensor per z draw (or a single tensor for one draw).
    """
    if isinstance(recovered, Tensor):
        recovered = [recovered]
    terms = [_sq(r, watermark, "loss_ext") for r in recovered]
    return torch.stack(terms).mean()


def loss_total(parts: dict[str, Tensor | float], weights: LossWeights) -> Tensor | float:
    return (
        weights.emb * parts["emb"]
        + weights.effective_lowf * parts["lowf"]
        + weights.ext * parts["ext"]
    )
