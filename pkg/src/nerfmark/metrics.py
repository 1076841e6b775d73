"""PSNR, global SSIM, RMSE and MAE on 8-bit quantized images.

Every metric first rounds and clips its inputs to the integer range
``[0, 255]``.  Float images in ``[0, 1]`` go through :func:`to_uint8`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

MAX_VALUE = 255.0
K1, K2 = 0.01, 0.03


def to_uint8(image) -> np.ndarray:
    """``round-half-up(255 * clamp(x, 0, 1))`` as uint8."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * x + 0.5).astype(np.uint8)


def _levels(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.clip(np.round(np.asarray(x, dtype=np.float64)), 0, 255)


def _pair(x, y):
    x, y = _levels(x), _levels(y)
    if x.shape != y.shape:
        raise ValueError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, max_value: float = MAX_VALUE) -> float:
    err = mse(x, y)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / err)


def ssim(x, y, data_range: float = MAX_VALUE) -> float:
    """Luminance * contrast * structure from whole-image statistics."""
    x, y = _pair(x, y)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    c3 = c2 / 2
    mx, my = x.mean(), y.mean()
    sx, sy = x.std(), y.std()
    sxy = np.mean((x - mx) * (y - my))
    lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    con = (2 * sx * sy + c2) / (sx**2 + sy**2 + c2)
    struct = (sxy + c3) / (sx * sy + c3)
    return float(lum * con * struct)


def rmse(x, y) -> float:
    return math.sqrt(mse(x, y))


def mae(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    rmse: float
    mae: float

    def as_row(self) -> dict:
        return asdict(self)


def report(x, y) -> MetricReport:
    """Metrics between two float images in ``[0, 1]`` after 8-bit quantization."""
    qx, qy = to_uint8(x), to_uint8(y)
    return MetricReport(psnr(qx, qy), ssim(qx, qy), rmse(qx, qy), mae(qx, qy))
