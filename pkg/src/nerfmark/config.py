"""Pipeline configuration: one flat TOML file, overridable from the CLI."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import tomli

from .optim import DEFAULT_LR


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    scene_dir: str = ""  # NeRF-synthetic directory; empty -> generate a toy scene
    watermark: str = ""  # watermark PNG; empty -> built-in logo
    work_dir: str = "runs/default"
    seed: int = 0

    # toy scene (used when scene_dir is empty)
    resolution: int = 64  # pixels, square
    toy_kind: str = "sphere"
    toy_views: int = 8
    toy_elevation_deg: float = 30.0  # degrees
    toy_radius: float = 4.0  # scene units

    # invertible network
    inn_blocks: int = 8
    inn_growth: int = 16
    inn_clamp: float = 5.0  # bound on the log-scale of each coupling
    inn_lambda_emb: float = 5.0
    inn_lambda_lowf: float = 0.5
    inn_lambda_ext: float = 1.0
    inn_lr: float = DEFAULT_LR
    inn_grad_clip: float = 0.0  # global gradient-norm bound, 0 disables
    inn_batch: int = 2
    inn_steps: int = 3000
    inn_pretrain_fraction: float = 0.3
    inn_corpus_size: int = 64
    inn_secret_logo_fraction: float = 0.5  # share of training secrets that are the watermark itself

    # radiance field
    nerf_steps: int = 2000
    nerf_lr: float = 5e-4
    nerf_batch_rays: int = 256
    nerf_samples: int = 64
    nerf_pos_freqs: int = 6
    nerf_dir_freqs: int = 4
    nerf_hidden: int = 128
    nerf_layers: int = 4
    nerf_near: float = 2.0  # scene units
    nerf_far: float = 6.0  # scene units
    nerf_white_bkgd: bool = True

    # enhancement module
    iqem_steps: int = 2000
    iqem_lr: float = 1e-4
    iqem_batch: int = 2

    # verification
    verify_angles: str = "0,45,90 +1"  # azimuths in degrees, "+k" adds offset views
    use_iqem: bool = True

    def __post_init__(self):
        weights = (self.inn_lambda_emb, self.inn_lambda_lowf, self.inn_lambda_ext)
        if min(weights) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.inn_blocks < 1:
            raise ValueError("inn_blocks must be >= 1")
        if not 0.0 <= self.inn_pretrain_fraction <= 1.0:
            raise ValueError("inn_pretrain_fraction must lie in [0, 1]")

    def with_overrides(self, **kw) -> "PipelineConfig":
        known = {f.name for f in fields(self)}
        unknown = set(kw) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    def digest(self) -> str:
        """Hash of every setting that can change results; the work dir is excluded."""
        content = {k: v for k, v in asdict(self).items() if k != "work_dir"}
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    return PipelineConfig().with_overrides(**data)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with TOML value syntax; bare words are strings."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = key.strip(), raw.strip()
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
