"""Image codec boundary, NeRF-synthetic scenes and procedural data.

Images live in memory as float32 ``(C, H, W)`` tensors in ``[0, 1]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .autodiff import Rng, Tensor
from .camera import CameraPose, PoseError, generate_rays, pose_from_angles
from .metrics import to_uint8

SPLITS = ("train", "val", "test")
NERF_SYNTHETIC_FOV = 0.6911112070083618  # camera_angle_x of the Blender scenes


class SceneError(ValueError):
    pass


def read_image(path: str | Path) -> Tensor:
    """Decode an 8-bit image; RGBA is composited over white."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
    x = arr.astype(np.float32) / 255.0
    if x.shape[-1] == 4:
        alpha = x[..., 3:]
        x = x[..., :3] * alpha + (1.0 - alpha)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


def write_image(path: str | Path, image: Tensor) -> None:
    """Quantize by ``round-half-up(255 * clamp(x, 0, 1))`` and save as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def quantize(image: Tensor) -> Tensor:
    """The float image that ``write_image`` followed by ``read_image`` yields."""
    return torch.from_numpy(to_uint8(image).astype(np.float32) / 255.0)


@dataclass
class Frame:
    image: Tensor
    pose: CameraPose
    split: str = "train"
    file_path: str = ""
    theta: float | None = None
    phi: float | None = None


@dataclass
class Scene:
    frames: list[Frame]
    camera_angle_x: float
    radius: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not any(f.split == "train" for f in self.frames):
            raise SceneError("scene has no train frames")
        shapes = {tuple(f.image.shape) for f in self.frames}
        if len(shapes) != 1:
            raise SceneError(f"frames differ in shape: {sorted(shapes)}")

    def split(self, name: str) -> list[Frame]:
        return [f for f in self.frames if f.split == name]

    @property
    def resolution(self) -> tuple[int, int]:
        _, h, w = self.frames[0].image.shape
        return h, w


def _resolve_image(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.suffix.lower() not in (".png", ".jpg", ".jpeg"):
        p = p.with_name(p.name + ".png")
    return p


def load_scene(directory: str | Path, splits=SPLITS) -> Scene:
    """Read ``transforms_<split>.json`` files and their images."""
    root = Path(directory)
    frames, fov = [], None
    found = False
    for split in splits:
        meta_path = root / f"transforms_{split}.json"
        if not meta_path.exists():
            continue
        found = True
        try:
            meta = json.loads(meta_path.read_text())
            split_fov = float(meta["camera_angle_x"])
            entries = meta["frames"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"{meta_path}: malformed transforms file ({exc})") from exc
        fov = split_fov if fov is None else fov
        for k, entry in enumerate(entries):
            try:
                fp = entry["file_path"]
                matrix = np.asarray(entry["transform_matrix"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise SceneError(f"{meta_path}: frame {k} malformed ({exc})") from exc
            img_path = _resolve_image(root, fp)
            if not img_path.exists():
                raise SceneError(f"{meta_path}: frame {k} image not found: {fp}")
            try:
                pose = CameraPose(matrix, split_fov)
            except PoseError as exc:
                raise SceneError(f"{meta_path}: frame {k} ({fp}): {exc}") from exc
            frames.append(
                Frame(read_image(img_path), pose, split, fp, entry.get("theta"), entry.get("phi"))
            )
    if not found:
        raise SceneError(f"{root}: no transforms_*.json found")
    return Scene(frames, fov)


def write_scene(directory: str | Path, scene: Scene) -> Path:
    root = Path(directory)
    for split in SPLITS:
        frames = scene.split(split)
        if not frames:
            continue
        entries = []
        for k, f in enumerate(frames):
            fp = f.file_path or f"./{split}/r_{k}"
            write_image(_resolve_image(root, fp), f.image)
            entry = {"file_path": fp, "transform_matrix": f.pose.camera_to_world.tolist()}
            if f.theta is not None:
                entry["theta"], entry["phi"] = f.theta, f.phi
            entries.append(entry)
        doc = {"camera_angle_x": scene.camera_angle_x, "frames": entries}
        (root / f"transforms_{split}.json").write_text(json.dumps(doc, indent=2))
    return root


# ---------------------------------------------------------------- toy scenes


def _hsv_palette(rng: Rng, n: int) -> np.ndarray:
    hue0 = rng.numpy.uniform(0, 1)
    hues = (hue0 + np.arange(n) / n) % 1.0
    sat = rng.numpy.uniform(0.55, 0.9, n)
    val = rng.numpy.uniform(0.6, 0.95, n)
    k = (np.array([5.0, 3.0, 1.0])[None] + hues[:, None] * 6) % 6
    rgb = val[:, None] - val[:, None] * sat[:, None] * np.clip(np.minimum(k, 4 - k), 0, 1)
    return rgb


@dataclass
class _Primitive:
    kind: str
    palette: np.ndarray
    checks: int
    light: np.ndarray
    size: float


def _make_primitive(kind: str, rng: Rng) -> _Primitive:
    if kind not in ("sphere", "cube"):
        raise ValueError(f"unknown toy scene kind {kind!r}")
    light = np.array([0.5, 0.3, 0.8]) + rng.numpy.uniform(-0.2, 0.2, 3)
    return _Primitive(
        kind,
        _hsv_palette(rng, 6),
        int(rng.integers(2, 5, 1)[0]),
        light / np.linalg.norm(light),
        1.0 if kind == "sphere" else 0.75,
    )


def _trace(prim: _Primitive, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    n = origins.shape[0]
    color = np.ones((n, 3))
    if prim.kind == "sphere":
        b = np.einsum("ij,ij->i", origins, dirs)
        c = np.einsum("ij,ij->i", origins, origins) - prim.size**2
        disc = b * b - c
        hit = disc > 0
        t = -b[hit] - np.sqrt(disc[hit])
        p = origins[hit] + t[:, None] * dirs[hit]
        normal = p / prim.size
        lon = np.arctan2(p[:, 1], p[:, 0])  # (-pi, pi]
        lat = np.arcsin(np.clip(normal[:, 2], -1, 1))
        sector = np.floor((lon + math.pi) / (2 * math.pi) * 6).astype(int) % 6
        band = np.floor((lat + math.pi / 2) / math.pi * 2 * prim.checks).astype(int)
        albedo = prim.palette[sector] * np.where((band + sector) % 2 == 0, 1.0, 0.55)[:, None]
    else:
        s = prim.size
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (-s - origins) * inv
            t1 = (s - origins) * inv
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        hit = (tmax > tmin) & (tmax > 0)
        t = tmin[hit]
        p = origins[hit] + t[:, None] * dirs[hit]
        axis = np.argmax(np.abs(p) / s, axis=1)
        sign = np.sign(p[np.arange(p.shape[0]), axis])
        normal = np.zeros_like(p)
        normal[np.arange(p.shape[0]), axis] = sign
        face = 2 * axis + (sign > 0)
        uv = np.floor((p / s + 1) * 0.5 * prim.checks).astype(int).sum(axis=1)
        albedo = prim.palette[face] * np.where(uv % 2 == 0, 1.0, 0.55)[:, None]
    shade = 0.35 + 0.65 * np.clip(normal @ prim.light, 0, None)
    color[hit] = np.clip(albedo * shade[:, None], 0, 1)
    return color


def _render_primitive(prim: _Primitive, pose: CameraPose, res: int, supersample: int = 2) -> Tensor:
    hi = res * supersample
    o, d = generate_rays(pose, hi, hi)
    o = o.numpy().astype(np.float64)
    d = d.numpy().astype(np.float64)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    img = _trace(prim, o, d).reshape(res, supersample, res, supersample, 3).mean(axis=(1, 3))
    return torch.from_numpy(img.transpose(2, 0, 1).astype(np.float32))


def generate_toy_scene(
    kind: str,
    n_views: int,
    resolution: int,
    rng: Rng,
    elevation_deg: float = 30.0,
    radius: float = 4.0,
    camera_angle_x: float = NERF_SYNTHETIC_FOV,
    thetas=None,
) -> Scene:
    """Ray-traced Lambertian primitive seen from an orbit at fixed elevation.

    Views sit at azimuths ``360 * k / n_views`` degrees unless ``thetas``
    lists them explicitly.  Background is white.
    """
    if n_views < 2:
        raise ValueError("a toy scene needs at least two views")
    prim = _make_primitive(kind, rng)
    if thetas is None:
        thetas = [360.0 * k / n_views for k in range(n_views)]
    frames = []
    for k, theta in enumerate(thetas):
        pose = CameraPose(pose_from_angles(theta, elevation_deg, radius), camera_angle_x)
        frames.append(
            Frame(_render_primitive(prim, pose, resolution), pose, "train", f"./train/r_{k}", float(theta), float(elevation_deg))
        )
    return Scene(frames, camera_angle_x, radius, {"kind": kind, "elevation_deg": elevation_deg})


# ---------------------------------------------------------- image corpora


def _texture_image(rng: Rng, res: int) -> np.ndarray:
    g = rng.numpy
    yy, xx = np.mgrid[0:res, 0:res] / res
    img = np.empty((3, res, res))
    for c in range(3):
        v = np.full((res, res), g.uniform(0.2, 0.8))
        for _ in range(4):
            fx, fy = g.uniform(-6, 6, 2)
            v += g.uniform(0, 0.25) * np.sin(2 * math.pi * (fx * xx + fy * yy) + g.uniform(0, 2 * math.pi))
        img[c] = v
    for _ in range(int(g.integers(1, 4))):
        cx, cy = g.uniform(0, 1, 2)
        rad = g.uniform(0.05, 0.3)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < rad**2
        img[:, mask] = g.uniform(0, 1, (3, 1))
    img += g.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def generate_image_corpus(n: int, resolution: int, rng: Rng, object_fraction: float = 0.5) -> Tensor:
    """Procedural covers: smooth textures with blobs, plus toy-object renders.

    Returns ``(n, 3, resolution, resolution)``.  Roughly ``object_fraction``
    of the images are single sphere/cube renders on white from random orbit
    poses, so the corpus covers the saturated backgrounds of the toy scenes.
    """
    out = []
    for _ in range(n):
        if rng.numpy.uniform() < object_fraction:
            kind = "sphere" if rng.numpy.uniform() < 0.5 else "cube"
            prim = _make_primitive(kind, rng)
            theta, phi = rng.numpy.uniform(0, 360), rng.numpy.uniform(10, 50)
            radius = rng.numpy.uniform(3.2, 5.0)
            pose = CameraPose(pose_from_angles(theta, phi, radius), NERF_SYNTHETIC_FOV)
            out.append(_render_primitive(prim, pose, resolution))
        else:
            out.append(torch.from_numpy(_texture_image(rng, resolution).astype(np.float32)))
    return torch.stack(out)


def random_mark(rng: Rng, resolution: int | tuple[int, int], channels: int = 3) -> Tensor:
    """Two-level mark of 2-4 random rings, boxes and discs, possibly inverted.

    Drawn from the same family as :func:`make_logo`; used as training secrets
    so the coupling network learns to hide marks in general.
    """
    g = rng.numpy
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    yy = (np.arange(h)[:, None] + 0.5) / h - 0.5 + np.zeros((1, w))
    xx = (np.arange(w)[None, :] + 0.5) / w - 0.5 + np.zeros((h, 1))
    lo, hi = g.uniform(0.05, 0.35), g.uniform(0.65, 0.95)
    mask = np.zeros((h, w), bool)
    for _ in range(int(g.integers(2, 5))):
        kind = int(g.integers(0, 3))
        cx, cy = g.uniform(-0.3, 0.3, 2)
        if kind == 0:
            outer = g.uniform(0.15, 0.4)
            inner = outer * g.uniform(0.5, 0.85)
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            mask |= (d2 < outer**2) & (d2 > inner**2)
        elif kind == 1:
            half_w, half_h = g.uniform(0.03, 0.35, 2)
            mask |= (np.abs(xx - cx) < half_w) & (np.abs(yy - cy) < half_h)
        else:
            mask |= (xx - cx) ** 2 + (yy - cy) ** 2 < g.uniform(0.05, 0.2) ** 2
    img = np.where(mask, hi, lo)
    if g.uniform() < 0.5:
        img = np.where(mask, lo, hi)
    return torch.from_numpy(np.repeat(img[None], channels, 0).astype(np.float32))


def make_logo(resolution: int, channels: int = 3) -> Tensor:
    """Grayscale ring-and-bar mark replicated across channels."""
    yy, xx = (np.mgrid[0:resolution, 0:resolution] + 0.5) / resolution - 0.5
    r2 = xx**2 + yy**2
    g = np.full((resolution, resolution), 0.15)
    ring = (r2 < 0.4**2) & (r2 > 0.28**2) & ~((xx > 0.1) & (np.abs(yy) < 0.12))
    g[ring] = 0.85
    g[(np.abs(xx + 0.02) < 0.06) & (np.abs(yy) < 0.18)] = 0.85
    return torch.from_numpy(np.repeat(g[None], channels, 0).astype(np.float32))
