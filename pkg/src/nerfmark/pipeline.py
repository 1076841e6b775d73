"""Stage orchestration: train-inn, embed, train-nerf, render, train-iqem,
extract, verify and the end-to-end run.

All stages read and write inside ``cfg.work_dir``::

    inn/inn.ckpt  inn/inn_loss.csv  inn/inn_phase.json
    scene/                      covers (toy scenes are materialized here)
    embed/scene/                watermarked training views
    embed/lost_info.ckpt        forward-pass lost information, exactness tests only
    embed/embed_metrics.csv
    nerf/nerf.ckpt  nerf/nerf_loss.csv
    render/<name>.png  render/renders.json
    iqem/iqem.ckpt  iqem/iqem_loss.csv
    extract/extract_metrics.csv  extract/<name>_<mode>.png
    verify/verify.csv
    manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import metrics
from .autodiff import Rng, Tensor
from .camera import CameraPose, pose_from_angles
from .checkpoint import load_checkpoint, load_module, module_tensors, save_checkpoint
from .config import PipelineConfig
from .data import (
    Frame,
    Scene,
    generate_image_corpus,
    generate_toy_scene,
    load_scene,
    make_logo,
    quantize,
    random_mark,
    read_image,
    write_image,
    write_scene,
)
from .inn import CouplingStack, embed, extract, init_stack, sample_z
from .iqem import IqemModel, enhance, init_iqem, train_iqem
from .losses import LossWeights, loss_emb, loss_ext, loss_lowf, loss_total
from .nerf import NerfModel, init_nerf, render_image, train_nerf
from .optim import Adam, AdamState

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def _work(cfg: PipelineConfig, *parts: str) -> Path:
    return Path(cfg.work_dir, *parts)


def _write_csv(path: Path, rows: Sequence[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ inputs


def cover_scene(cfg: PipelineConfig) -> Scene:
    if cfg.scene_dir:
        return load_scene(cfg.scene_dir)
    return generate_toy_scene(
        cfg.toy_kind,
        cfg.toy_views,
        cfg.resolution,
        Rng(cfg.seed).child("scene"),
        cfg.toy_elevation_deg,
        cfg.toy_radius,
    )


def watermark_image(cfg: PipelineConfig, resolution: tuple[int, int]) -> Tensor:
    if not cfg.watermark:
        h, w = resolution
        if h != w:
            raise PipelineError("built-in logo needs square frames; pass a watermark image")
        return make_logo(h)
    mark = read_image(cfg.watermark)
    if tuple(mark.shape[1:]) != tuple(resolution):
        raise PipelineError(
            f"watermark {cfg.watermark} is {tuple(mark.shape[1:])}, frames are {tuple(resolution)}"
        )
    return mark


def build_stack(cfg: PipelineConfig) -> CouplingStack:
    return CouplingStack(3, cfg.inn_blocks, cfg.inn_growth, cfg.inn_clamp)


def build_nerf(cfg: PipelineConfig) -> NerfModel:
    return NerfModel(cfg.nerf_pos_freqs, cfg.nerf_dir_freqs, cfg.nerf_hidden, cfg.nerf_layers)


def load_stack(cfg: PipelineConfig, path: Path | None = None) -> CouplingStack:
    path = path or _work(cfg, "inn", "inn.ckpt")
    tensors, _ = load_checkpoint(path)
    return load_module(build_stack(cfg), tensors, "stack.").eval()


def load_nerf(cfg: PipelineConfig, path: Path | None = None) -> NerfModel:
    tensors, _ = load_checkpoint(path or _work(cfg, "nerf", "nerf.ckpt"))
    return load_module(build_nerf(cfg), tensors, "nerf.").eval()


def load_iqem(path: Path) -> IqemModel:
    tensors, _ = load_checkpoint(path)
    return load_module(IqemModel(), tensors, "iqem.").eval()


# ----------------------------------------------------------- INN training


def _straight_through_quantize(x: Tensor) -> Tensor:
    """8-bit export in the forward pass, identity in the backward pass."""
    return x + (torch.round(x.clamp(0, 1) * 255) / 255 - x).detach()


class InnTrainer:
    """Trains the coupling stack on a procedural cover corpus.

    Training secrets are the watermark itself with probability
    ``inn_secret_logo_fraction`` and a fresh random mark otherwise, so the
    stack learns a hiding map rather than a constant watermark output.
    The extraction loss sees the stego image after 8-bit export.
    """

    def __init__(self, cfg: PipelineConfig, watermark: Tensor, total_steps: int | None = None):
        self.cfg = cfg
        self.watermark = watermark
        res = watermark.shape[-1]
        self.corpus = generate_image_corpus(cfg.inn_corpus_size, res, Rng(cfg.seed).child("corpus"))
        self.stack = init_stack(build_stack(cfg), Rng(cfg.seed).child("inn-init"))
        self.opt = Adam(self.stack, lr=cfg.inn_lr)
        self.rng = Rng(cfg.seed).child("inn-train")
        self.total_steps = cfg.inn_steps if total_steps is None else total_steps
        self.boundary = int(round(cfg.inn_pretrain_fraction * self.total_steps))
        self.weights = LossWeights(cfg.inn_lambda_emb, cfg.inn_lambda_lowf, cfg.inn_lambda_ext)
        self.step = 0
        self.history: list[dict] = []

    def _batch(self) -> tuple[Tensor, Tensor]:
        n, b = self.corpus.shape[0], self.cfg.inn_batch
        covers = self.corpus[torch.from_numpy(self.rng.integers(0, n, b))]
        secrets = []
        for _ in range(b):
            if self.rng.numpy.uniform() < self.cfg.inn_secret_logo_fraction:
                secrets.append(self.watermark)
            else:
                secrets.append(random_mark(self.rng, tuple(self.watermark.shape[-2:]), self.watermark.shape[0]))
        return covers, torch.stack(secrets)

    def train_step(self) -> dict:
        covers, secrets = self._batch()
        bundle = embed(covers, secrets, self.stack)
        z = sample_z(bundle.lost_info.shape, self.rng)
        _, recovered = extract(_straight_through_quantize(bundle.stego), z, self.stack)
        parts = {
            "emb": loss_emb(bundle.stego, covers),
            "lowf": loss_lowf(covers, bundle.stego),
            "ext": loss_ext(recovered, secrets),
        }
        weights = self.weights.at_step(self.step, self.boundary)
        total = loss_total(parts, weights)
        self.opt.zero_grad()
        total.backward()
        if self.cfg.inn_grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.stack.parameters(), self.cfg.inn_grad_clip)
        self.opt.step()
        row = {
            "step": self.step,
            "phase": weights.phase,
            "lambda_emb": weights.emb,
            "lambda_lowf": weights.effective_lowf,
            "lambda_ext": weights.ext,
            **{k: v.item() for k, v in parts.items()},
            "total": total.item(),
        }
        self.history.append(row)
        self.step += 1
        return row

    def train(self, steps: int | None = None, log_every: int = 100) -> list[dict]:
        steps = self.total_steps - self.step if steps is None else steps
        t0 = time.time()
        for _ in range(steps):
            row = self.train_step()
            if log_every and row["step"] % log_every == 0:
                log.info("inn step %d total %.3f (%.1fs)", row["step"], row["total"], time.time() - t0)
        return self.history

    def save(self, path: Path) -> Path:
        tensors = {**module_tensors(self.stack, "stack."), **self.opt.state.to_tensors()}
        meta = {
            "kind": "inn",
            "step": self.step,
            "total_steps": self.total_steps,
            "boundary": self.boundary,
            "seed": self.cfg.seed,
            "config": self.cfg.digest(),
            "adam": self.opt.state.hyper(),
            "rng": self.rng.get_state(),
        }
        return save_checkpoint(path, tensors, meta)

    @classmethod
    def resume(cls, cfg: PipelineConfig, watermark: Tensor, path: Path) -> "InnTrainer":
        tensors, meta = load_checkpoint(path)
        trainer = cls(cfg, watermark, meta["total_steps"])
        load_module(trainer.stack, tensors, "stack.")
        trainer.opt.state = AdamState.from_tensors(tensors, meta["adam"])
        trainer.rng.set_state(meta["rng"])
        trainer.step = meta["step"]
        return trainer


def cmd_train_inn(cfg: PipelineConfig, resume: Path | None = None) -> Path:
    scene_res = cover_scene(cfg).resolution
    mark = watermark_image(cfg, scene_res)
    if resume is not None:
        trainer = InnTrainer.resume(cfg, mark, resume)
    else:
        trainer = InnTrainer(cfg, mark)
    if trainer.corpus.shape[0] == 0:
        raise PipelineError("train-inn: empty cover corpus")
    trainer.train()
    out = _work(cfg, "inn")
    _write_csv(out / "inn_loss.csv", trainer.history)
    phase = {
        "boundary_step": trainer.boundary,
        "lambda_lowf": cfg.inn_lambda_lowf,
        "activated_at": trainer.boundary if trainer.boundary < trainer.total_steps else None,
    }
    (out / "inn_phase.json").write_text(json.dumps(phase, indent=2))
    return trainer.save(out / "inn.ckpt")


# ------------------------------------------------------------------ embed


def cmd_embed(cfg: PipelineConfig, scene: Scene | None = None) -> Path:
    """Watermark every training view; returns the watermarked scene dir."""
    scene = scene or cover_scene(cfg)
    write_scene(_work(cfg, "scene"), scene)
    stack = load_stack(cfg)
    mark = watermark_image(cfg, scene.resolution)
    rows, lost, frames = [], {}, []
    with torch.no_grad():
        for k, frame in enumerate(scene.frames):
            if frame.split != "train":
                frames.append(frame)
                continue
            bundle = embed(frame.image[None], mark[None], stack)
            stego = quantize(bundle.stego[0])
            lost[f"frame{k}"] = bundle.lost_info[0]
            rep = metrics.report(frame.image, stego)
            rows.append({"frame": frame.file_path, "theta": frame.theta, **rep.as_row()})
            frames.append(Frame(stego, frame.pose, frame.split, frame.file_path, frame.theta, frame.phi))
    out = _work(cfg, "embed")
    wm_scene = Scene(frames, scene.camera_angle_x, scene.radius, scene.meta)
    write_scene(out / "scene", wm_scene)
    save_checkpoint(out / "lost_info.ckpt", lost, {"kind": "lost_info", "seed": cfg.seed})
    _write_csv(out / "embed_metrics.csv", rows)
    return out / "scene"


# ------------------------------------------------------------------- NeRF


def cmd_train_nerf(cfg: PipelineConfig, scene_dir: Path | None = None) -> Path:
    scene = load_scene(scene_dir or _work(cfg, "embed", "scene"), splits=("train",))
    model = init_nerf(build_nerf(cfg), Rng(cfg.seed).child("nerf-init"))
    losses = train_nerf(
        model,
        [(f.image, f.pose) for f in scene.frames],
        cfg.nerf_steps,
        cfg.nerf_batch_rays,
        Rng(cfg.seed).child("nerf-train"),
        lr=cfg.nerf_lr,
        n_samples=cfg.nerf_samples,
        near=cfg.nerf_near,
        far=cfg.nerf_far,
        white_bkgd=cfg.nerf_white_bkgd,
    )
    out = _work(cfg, "nerf")
    _write_csv(out / "nerf_loss.csv", [{"step": i, "loss": v} for i, v in enumerate(losses)])
    meta = {"kind": "nerf", "seed": cfg.seed, "config": cfg.digest(), "steps": cfg.nerf_steps}
    return save_checkpoint(out / "nerf.ckpt", module_tensors(model, "nerf."), meta)


@dataclass
class View:
    name: str
    pose: CameraPose
    theta: float | None = None
    kind: str = "explicit"


def _scene_radius(scene: Scene, cfg: PipelineConfig) -> float:
    if scene.radius is not None:
        return scene.radius
    return float(np.linalg.norm(scene.frames[0].pose.origin))


def parse_angle_sweep(spec: str) -> list[tuple[float, str]]:
    """``"30,45,60 +1"`` -> [(30, train), (31, offset), (45, train), ...]."""
    m = re.fullmatch(r"\s*([-\d.,\s]+?)\s*((?:[+-]\d+(?:\.\d+)?\s*)*)", spec)
    if not m:
        raise ValueError(f"cannot parse angle sweep {spec!r}")
    bases = [float(a) for a in m.group(1).replace(" ", "").split(",") if a]
    offsets = [float(o) for o in re.findall(r"[+-]\d+(?:\.\d+)?", m.group(2))]
    out = []
    for base in bases:
        out.append((base, "base"))
        out.extend((base + off, "offset") for off in offsets)
    return out


def resolve_views(cfg: PipelineConfig, spec: str, scene: Scene) -> list[View]:
    """Pose spec: ``train``, ``frames:0,2``, ``angles:30,45 +1`` or a JSON
    file holding a list of 4x4 camera-to-world matrices."""
    train = scene.split("train")
    if spec == "train":
        return [View(f"train_{k}", f.pose, f.theta, "train") for k, f in enumerate(train)]
    if spec.startswith("frames:"):
        idx = [int(i) for i in spec[len("frames:"):].split(",")]
        return [View(f"train_{k}", train[k].pose, train[k].theta, "train") for k in idx]
    if spec.startswith("angles:"):
        radius = _scene_radius(scene, cfg)
        phi = train[0].phi if train[0].phi is not None else cfg.toy_elevation_deg
        train_thetas = [f.theta for f in train if f.theta is not None]
        views = []
        for theta, _ in parse_angle_sweep(spec[len("angles:"):]):
            on_train = any(abs((theta - t + 180) % 360 - 180) < 1e-6 for t in train_thetas)
            pose = CameraPose(pose_from_angles(theta, phi, radius), scene.camera_angle_x)
            views.append(View(f"theta_{theta:g}", pose, theta, "train" if on_train else "offset"))
        return views
    path = Path(spec)
    if path.exists():
        mats = json.loads(path.read_text())
        return [View(f"pose_{k}", CameraPose(np.asarray(m), scene.camera_angle_x)) for k, m in enumerate(mats)]
    raise ValueError(f"unrecognized pose spec {spec!r}")


def render_views(cfg: PipelineConfig, model: NerfModel, views: Sequence[View], resolution) -> list[Tensor]:
    h, w = resolution
    return [
        render_image(model, v.pose, w, h, cfg.nerf_samples, cfg.nerf_near, cfg.nerf_far, cfg.nerf_white_bkgd)
        for v in views
    ]


def cmd_render(cfg: PipelineConfig, spec: str = "train") -> list[tuple[View, Tensor]]:
    scene = load_scene(_work(cfg, "embed", "scene"), splits=("train",))
    model = load_nerf(cfg)
    views = resolve_views(cfg, spec, scene)
    images = render_views(cfg, model, views, scene.resolution)
    out = _work(cfg, "render")
    entries = []
    for view, img in zip(views, images):
        write_image(out / f"{view.name}.png", img)
        entries.append({"name": view.name, "theta": view.theta, "kind": view.kind,
                        "transform_matrix": view.pose.camera_to_world.tolist()})
    out.mkdir(parents=True, exist_ok=True)
    (out / "renders.json").write_text(json.dumps(entries, indent=2))
    return list(zip(views, images))


# ------------------------------------------------------------------- IQEM


def cmd_train_iqem(cfg: PipelineConfig, pairs: Sequence[tuple[Tensor, Tensor]] | None = None) -> Path:
    """Fit the enhancer on (training-pose render, watermarked view) pairs."""
    if pairs is None:
        scene = load_scene(_work(cfg, "embed", "scene"), splits=("train",))
        model = load_nerf(cfg)
        views = resolve_views(cfg, "train", scene)
        renders = [quantize(r) for r in render_views(cfg, model, views, scene.resolution)]
        pairs = [(r, f.image) for r, f in zip(renders, scene.frames)]
    iqem = init_iqem(IqemModel(), Rng(cfg.seed).child("iqem-init"))
    losses = train_iqem(iqem, pairs, cfg.iqem_steps, Rng(cfg.seed).child("iqem-train"), cfg.iqem_lr, cfg.iqem_batch)
    out = _work(cfg, "iqem")
    _write_csv(out / "iqem_loss.csv", [{"step": i, "loss": v} for i, v in enumerate(losses)])
    meta = {"kind": "iqem", "seed": cfg.seed, "config": cfg.digest(), "steps": cfg.iqem_steps}
    return save_checkpoint(out / "iqem.ckpt", module_tensors(iqem, "iqem."), meta)


# ---------------------------------------------------------------- extract


@torch.no_grad()
def extract_watermarks(
    stack: CouplingStack,
    images: Sequence[Tensor],
    seed: int,
    iqem: IqemModel | None = None,
) -> list[Tensor]:
    """Recover watermarks from 8-bit images with seeded z draws.

    The z stream depends only on ``seed`` and the image order, so runs with
    and without ``iqem`` see identical z.
    """
    rng = Rng(seed).child("extract-z")
    out = []
    for img in images:
        x = img[None]
        if iqem is not None:
            x = quantize(enhance(iqem, x))
        z = sample_z((1, 12, *[s // 2 for s in x.shape[-2:]]), rng)
        _, mark = extract(x, z, stack)
        out.append(mark[0])
    return out


def cmd_extract(
    cfg: PipelineConfig,
    images: Sequence[tuple[str, Tensor]] | None = None,
    use_iqem: bool | None = None,
    iqem_path: Path | None = None,
) -> list[dict]:
    """Extraction metrics of R_W against M_W, one row per image and mode."""
    use_iqem = cfg.use_iqem if use_iqem is None else use_iqem
    iqem_path = iqem_path or _work(cfg, "iqem", "iqem.ckpt")
    if use_iqem and not Path(iqem_path).exists():
        raise PipelineError(f"extract: IQEM requested but checkpoint {iqem_path} does not exist")
    if images is None:
        rendered = cmd_render(cfg, "train")
        images = [(v.name, quantize(img)) for v, img in rendered]
    stack = load_stack(cfg)
    mark = watermark_image(cfg, tuple(images[0][1].shape[-2:]))
    modes = [("plain", None)]
    if use_iqem:
        modes.append(("iqem", load_iqem(iqem_path)))
    rows = []
    out = _work(cfg, "extract")
    for mode, iqem in modes:
        recovered = extract_watermarks(stack, [img for _, img in images], cfg.seed, iqem)
        for (name, _), rec in zip(images, recovered):
            write_image(out / f"{name}_{mode}.png", rec)
            rows.append({"image": name, "mode": mode, **metrics.report(mark, rec).as_row()})
    _write_csv(out / "extract_metrics.csv", rows)
    return rows


# ----------------------------------------------------------------- verify


def cmd_verify(cfg: PipelineConfig, sweep: str | None = None) -> list[dict]:
    """Render each requested azimuth, extract, and report per-view PSNR.

    Rows are tagged ``train`` (azimuth of a training view), ``offset``, or
    ``baseline`` (extraction from un-watermarked corpus images).
    """
    sweep = sweep or cfg.verify_angles
    scene = load_scene(_work(cfg, "embed", "scene"), splits=("train",))
    views = resolve_views(cfg, "angles:" + sweep, scene)
    model = load_nerf(cfg)
    stack = load_stack(cfg)
    iqem_path = _work(cfg, "iqem", "iqem.ckpt")
    iqem = None
    if cfg.use_iqem:
        if not iqem_path.exists():
            raise PipelineError(f"verify: IQEM requested but checkpoint {iqem_path} does not exist")
        iqem = load_iqem(iqem_path)
    mark = watermark_image(cfg, scene.resolution)
    renders = [quantize(r) for r in render_views(cfg, model, views, scene.resolution)]
    recovered = extract_watermarks(stack, renders, cfg.seed, iqem)
    rows = []
    for view, rec in zip(views, recovered):
        rows.append({"view": view.name, "theta": view.theta, "kind": view.kind,
                     **metrics.report(mark, rec).as_row()})
    res = scene.resolution[0]
    baseline = generate_image_corpus(len(views), res, Rng(cfg.seed).child("verify-baseline"))
    for k, rec in enumerate(extract_watermarks(stack, [quantize(b) for b in baseline], cfg.seed, iqem)):
        rows.append({"view": f"baseline_{k}", "theta": None, "kind": "baseline",
                     **metrics.report(mark, rec).as_row()})
    _write_csv(_work(cfg, "verify", "verify.csv"), rows)
    return rows


# -------------------------------------------------------------------- e2e


def _mean(rows, key="psnr", **match) -> float:
    vals = [float(r[key]) for r in rows if all(r[k] == v for k, v in match.items())]
    return float(np.mean(vals)) if vals else math.nan


def cmd_e2e(cfg: PipelineConfig) -> dict:
    stages = []
    t0 = time.time()

    def mark(stage):
        stages.append({"stage": stage, "elapsed_s": round(time.time() - t0, 3)})
        log.info("stage %s done at %.1fs", stage, time.time() - t0)

    cmd_train_inn(cfg)
    mark("train-inn")
    cmd_embed(cfg)
    mark("embed")
    cmd_train_nerf(cfg)
    mark("train-nerf")
    rendered = cmd_render(cfg, "train")
    mark("render")
    cmd_train_iqem(cfg)
    mark("train-iqem")
    extract_rows = cmd_extract(cfg, [(v.name, quantize(img)) for v, img in rendered], use_iqem=cfg.use_iqem)
    mark("extract")
    verify_rows = cmd_verify(cfg)
    mark("verify")

    embed_rows = read_csv(_work(cfg, "embed", "embed_metrics.csv"))
    scene = load_scene(_work(cfg, "embed", "scene"), splits=("train",))
    render_psnr = [metrics.psnr(metrics.to_uint8(img), metrics.to_uint8(f.image))
                   for (_, img), f in zip(rendered, scene.frames)]
    summary = {
        "embed_psnr_mean": _mean(embed_rows),
        "embed_ssim_mean": _mean(embed_rows, "ssim"),
        "render_psnr_mean": float(np.mean(render_psnr)),
        "extract_psnr_plain": _mean(extract_rows, mode="plain"),
        "extract_psnr_iqem": _mean(extract_rows, mode="iqem"),
        "verify_psnr_train": _mean(verify_rows, kind="train"),
        "verify_psnr_offset": _mean(verify_rows, kind="offset"),
        "verify_psnr_baseline": _mean(verify_rows, kind="baseline"),
    }
    root = Path(cfg.work_dir)
    artifacts = {
        str(p.relative_to(root)): _sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "stages": stages,
        "metrics": summary,
        "extract": extract_rows,
        "verify": verify_rows,
        "artifacts": artifacts,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return manifest


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(type(o))
