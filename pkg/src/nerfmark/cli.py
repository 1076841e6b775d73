"""``nerfmark <command> --config FILE [--seed N] [--out DIR] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import load_config, parse_override
from .data import SceneError, read_image

COMMANDS = ("train-inn", "embed", "train-nerf", "render", "train-iqem", "extract", "verify", "e2e")


def _table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    keys = list(rows[0])

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    lines = ["  ".join(k.ljust(w) for k, w in zip(keys, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="override the work directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nerfmark", description="Watermark a radiance field through its training views.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train-inn", parents=[common], help="train the coupling network")
    p.add_argument("--resume", type=Path, help="continue from an INN checkpoint")
    sub.add_parser("embed", parents=[common], help="watermark every training view")
    sub.add_parser("train-nerf", parents=[common], help="fit the radiance field to the watermarked views")
    p = sub.add_parser("render", parents=[common], help="render views from the radiance field")
    p.add_argument("--poses", default="train",
                   help='"train", "frames:0,2", "angles:30,45 +1" or a JSON file of 4x4 matrices')
    sub.add_parser("train-iqem", parents=[common], help="train the enhancement module on training-pose renders")
    p = sub.add_parser("extract", parents=[common], help="recover the watermark from images")
    p.add_argument("--images", nargs="*", type=Path, help="PNG files; default renders the training poses")
    p.add_argument("--no-iqem", action="store_true", help="skip the enhancement mode")
    p = sub.add_parser("verify", parents=[common], help="extraction across an azimuth sweep")
    p.add_argument("--angles", help='sweep such as "0,45,90 +1"')
    sub.add_parser("e2e", parents=[common], help="run every stage in order")
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    overrides = dict(parse_override(s) for s in args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["work_dir"] = str(args.out)
    return cfg.with_overrides(**overrides)


def run(args) -> int:
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "train-inn":
        print(pipeline.cmd_train_inn(cfg, args.resume))
    elif cmd == "embed":
        print(pipeline.cmd_embed(cfg))
        print(_table(pipeline.read_csv(Path(cfg.work_dir, "embed", "embed_metrics.csv"))))
    elif cmd == "train-nerf":
        print(pipeline.cmd_train_nerf(cfg))
    elif cmd == "render":
        for view, _ in pipeline.cmd_render(cfg, args.poses):
            print(Path(cfg.work_dir, "render", f"{view.name}.png"))
    elif cmd == "train-iqem":
        print(pipeline.cmd_train_iqem(cfg))
    elif cmd == "extract":
        images = [(p.stem, read_image(p)) for p in args.images] if args.images else None
        use_iqem = False if args.no_iqem else None
        print(_table(pipeline.cmd_extract(cfg, images, use_iqem=use_iqem)))
    elif cmd == "verify":
        print(_table(pipeline.cmd_verify(cfg, args.angles)))
    elif cmd == "e2e":
        manifest = pipeline.cmd_e2e(cfg)
        print(json.dumps(manifest["metrics"], indent=2))
        print(Path(cfg.work_dir, "manifest.json"))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except (pipeline.PipelineError, SceneError, CheckpointError, KeyError, ValueError) as exc:
        print(f"nerfmark {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
