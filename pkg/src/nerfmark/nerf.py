"""A small coarse-only radiance field and its volume renderer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Rng, Tensor
from .camera import CameraPose, generate_rays
from .optim import Adam

TERMINAL_DELTA = 1e10


def positional_encoding(v: Tensor, n_freqs: int) -> Tensor:
    """``[sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(...)]``.

    Each sin/cos entry spans all ``k`` components of ``v``; output width is
    ``2 * n_freqs * k``.
    """
    if n_freqs < 1:
        raise ValueError("positional_encoding needs at least one frequency")
    parts = []
    for j in range(n_freqs):
        arg = (2.0**j * math.pi) * v
        parts += [torch.sin(arg), torch.cos(arg)]
    return torch.cat(parts, dim=-1)


class NerfModel(nn.Module):
    def __init__(self, pos_freqs: int = 6, dir_freqs: int = 4, hidden: int = 128, n_layers: int = 4):
        super().__init__()
        self.pos_freqs, self.dir_freqs = pos_freqs, dir_freqs
        dims = [6 * pos_freqs] + [hidden] * n_layers
        self.trunk = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.density = nn.Linear(hidden, 1)
        self.feature = nn.Linear(hidden, hidden)
        self.color_hidden = nn.Linear(hidden + 6 * dir_freqs, hidden // 2)
        self.color = nn.Linear(hidden // 2, 3)

    def forward(self, x: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
        """Map positions and unit directions to ``(rgb, sigma)``."""
        h = positional_encoding(x, self.pos_freqs)
        for layer in self.trunk:
            h = F.relu(layer(h))
        sigma = F.relu(self.density(h)).squeeze(-1)
        h = torch.cat([self.feature(h), positional_encoding(d, self.dir_freqs)], dim=-1)
        rgb = torch.sigmoid(self.color(F.relu(self.color_hidden(h))))
        return rgb, sigma


def init_nerf(model: NerfModel, rng: Rng) -> NerfModel:
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.Linear):
                mod.weight.copy_(rng.normal(mod.weight.shape, math.sqrt(2.0 / mod.in_features)))
                mod.bias.zero_()
        model.density.bias.fill_(0.1)
    return model


@dataclass
class Ray:
    origin: Tensor
    direction: Tensor
    near: float
    far: float

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"ray needs near < far, got {self.near} >= {self.far}")
        norm = float(torch.linalg.vector_norm(self.direction))
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"ray direction must be unit length, got norm {norm}")


def sample_depths(n_rays: int, near: float, far: float, n_samples: int, rng: Rng | None) -> Tensor:
    """Stratified depths, or bin midpoints when ``rng`` is None."""
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    bins = torch.arange(n_samples, dtype=torch.float32).expand(n_rays, n_samples)
    jitter = rng.uniform((n_rays, n_samples)) if rng is not None else torch.full_like(bins, 0.5)
    return near + (far - near) * (bins + jitter) / n_samples


def composite(sigma: Tensor, rgb: Tensor, deltas: Tensor) -> tuple[Tensor, Tensor]:
    """Alpha-compositing quadrature of the volume rendering integral.

    ``sigma`` and ``deltas`` are ``(..., S)``, ``rgb`` is ``(..., S, 3)``.
    Returns the composited color and the per-sample weights ``T_i * alpha_i``.
    """
    alpha = 1.0 - torch.exp(-sigma * deltas)
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = alpha * trans
    return (weights.unsqueeze(-1) * rgb).sum(dim=-2), weights


def render_rays(
    model: NerfModel,
    origins: Tensor,
    dirs: Tensor,
    near: float,
    far: float,
    n_samples: int,
    rng: Rng | None = None,
    white_bkgd: bool = True,
) -> tuple[Tensor, Tensor]:
    t = sample_depths(origins.shape[0], near, far, n_samples, rng)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    rgb, sigma = model(pts, dirs[:, None, :].expand_as(pts))
    deltas = torch.cat([t[:, 1:] - t[:, :-1], torch.full_like(t[:, :1], TERMINAL_DELTA)], dim=-1)
    color, weights = composite(sigma, rgb, deltas)
    if white_bkgd:
        color = color + (1.0 - weights.sum(-1, keepdim=True))
    return color, weights


def render_ray(model: NerfModel, ray: Ray, n_samples: int, rng: Rng | None = None, white_bkgd: bool = False) -> Tensor:
    color, _ = render_rays(
        model, ray.origin[None], ray.direction[None], ray.near, ray.far, n_samples, rng, white_bkgd
    )
    return color[0]


@torch.no_grad()
def render_image(
    model: NerfModel,
    pose: CameraPose,
    width: int,
    height: int,
    n_samples: int = 64,
    near: float = 2.0,
    far: float = 6.0,
    white_bkgd: bool = True,
    chunk: int = 4096,
) -> Tensor:
    """Midpoint-sampled render of one view as a (3, H, W) image."""
    origins, dirs = generate_rays(pose, width, height)
    out = [
        render_rays(model, origins[i : i + chunk], dirs[i : i + chunk], near, far, n_samples, None, white_bkgd)[0]
        for i in range(0, origins.shape[0], chunk)
    ]
    return torch.cat(out).T.reshape(3, height, width).contiguous()


def train_nerf(
    model: NerfModel,
    frames: Sequence[tuple[Tensor, CameraPose]],
    steps: int,
    batch_rays: int,
    rng: Rng,
    lr: float = 5e-4,
    n_samples: int = 64,
    near: float = 2.0,
    far: float = 6.0,
    white_bkgd: bool = True,
) -> list[float]:
    """Photometric MSE over random ray batches drawn from all frames."""
    if not frames:
        raise ValueError("train_nerf: scene has no frames")
    origins, dirs, targets = [], [], []
    for image, pose in frames:
        _, h, w = image.shape
        o, d = generate_rays(pose, w, h)
        origins.append(o)
        dirs.append(d)
        targets.append(image.reshape(3, -1).T)
    origins, dirs, targets = torch.cat(origins), torch.cat(dirs), torch.cat(targets)

    opt = Adam(model, lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, origins.shape[0], batch_rays))
        color, _ = render_rays(model, origins[idx], dirs[idx], near, far, n_samples, rng, white_bkgd)
        loss = ((color - targets[idx]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
