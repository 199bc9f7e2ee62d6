"""Command-line entry point: ``posegraph synth|train|eval|infer|gradcheck``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import gradcheck as gc
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_run_config
from .inference import evaluate_results, infer_image, instance_to_result, run_inference
from .model import PoseNet
from .synth import SKELETON, load_dataset, write_split
from .trainer import NonFiniteLossError, TrainingLog, train

log = logging.getLogger("posegraph")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

TRAIN_SPLIT_OFFSET = 0
EVAL_SPLIT_OFFSET = 1_000_000

INSTANCE_COLORS = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
]


class CommandError(RuntimeError):
    """User-facing failure with a message naming the offending path or value."""


def _write_json(path: Path, doc) -> None:
    try:
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}") from exc


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _split_dir(data: Path, split: str) -> Path:
    """Accept either a split directory or a dataset root holding ``split/``."""
    if (data / "annotations.json").exists():
        return data
    if (data / split / "annotations.json").exists():
        return data / split
    raise CommandError(f"annotations file not found under {data} (looked for annotations.json and {split}/annotations.json)")


def _apply_tta_flags(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "flip", False):
        cfg.tta.flip = True
    if getattr(args, "scales", None):
        try:
            cfg.tta.scales = [float(s) for s in args.scales.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"--scales must be comma-separated numbers, got {args.scales!r}") from exc
    return cfg.validate()


def _load_model(cfg: RunConfig, checkpoint) -> PoseNet:
    if checkpoint is None:
        raise CommandError("--checkpoint is required")
    model = PoseNet(cfg.model, cfg.train.seed)
    load_checkpoint(checkpoint, model, with_optimizer=False)
    return model.eval()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out_dir) -> dict:
    if out_dir is None:
        raise CommandError("--out is required")
    out = Path(out_dir)
    if out.exists() and not out.is_dir():
        raise CommandError(f"output path {out} exists and is not a directory")
    _ensure_dir(out)
    spec = cfg.scene
    write_split(_ensure_dir(out / "train"), spec, spec.train_count, TRAIN_SPLIT_OFFSET)
    write_split(_ensure_dir(out / "eval"), spec, spec.eval_count, EVAL_SPLIT_OFFSET)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": spec.seed,
        "counts": {"train": spec.train_count, "eval": spec.eval_count},
        "index_offsets": {"train": TRAIN_SPLIT_OFFSET, "eval": EVAL_SPLIT_OFFSET},
        "scene": dataclasses.asdict(spec),
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {spec.train_count} train and {spec.eval_count} eval scenes to {out}")
    return manifest


def cmd_train(cfg: RunConfig, data_dir, out_dir, resume=None) -> TrainingLog:
    if data_dir is None or out_dir is None:
        raise CommandError("--data and --out are required")
    samples = load_dataset(_split_dir(Path(data_dir), "train"))
    if not samples:
        raise CommandError(f"training set under {data_dir} is empty")
    model = PoseNet(cfg.model, cfg.train.seed)
    start, history = 0, TrainingLog()
    if resume is not None:
        manifest = load_checkpoint(resume, model, with_optimizer=True)
        start = int(manifest["epoch"])
        history.rows = [dict(r) for r in manifest.get("extra", {}).get("log", [])]
        log.info("resuming from %s at epoch %d", resume, start)
    out = _ensure_dir(Path(out_dir))
    ckpt_dir = _ensure_dir(out / "checkpoints") if cfg.train.checkpoint_every else None
    history = train(model, samples, cfg.train, start_epoch=start, checkpoint_dir=ckpt_dir, history=history)
    history.write(out / "log.csv")
    save_checkpoint(out / "model.json", model, cfg.model, cfg.train.epochs, extra={"log": history.rows})
    print(f"trained {cfg.train.epochs - start} epochs; checkpoint {out / 'model.json'}, log {out / 'log.csv'}")
    return history


def cmd_eval(cfg: RunConfig, checkpoint, data_dir, out_path=None) -> dict:
    if data_dir is None:
        raise CommandError("--data is required")
    model = _load_model(cfg, checkpoint)
    samples = load_dataset(_split_dir(Path(data_dir), "eval"))
    out = Path(out_path) if out_path is not None else Path("results.json")
    if not samples:
        log.warning("evaluation set under %s is empty; reporting null metrics", data_dir)
        print("warning: empty evaluation set, metrics are null", file=sys.stderr)
    results = run_inference(model, samples, cfg.decode, cfg.tta)
    report = evaluate_results(results, samples, cfg.decode)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tta": {"flip": cfg.tta.flip, "scales": list(cfg.tta.scales)},
        "metrics": report.to_dict(),
        "results": results,
    }
    _write_json(out, doc)
    print(report.table())
    return doc


def _resize_short_side(img: Image.Image, short: int, unit: int) -> Image.Image:
    w, h = img.size
    s = short / min(w, h)
    nw = max(unit, int(round(w * s / unit)) * unit)
    nh = max(unit, int(round(h * s / unit)) * unit)
    return img.resize((nw, nh), Image.BILINEAR)


def draw_overlay(img: Image.Image, instances: list[dict], radius: int = 3) -> Image.Image:
    out = img.convert("RGB").copy()
    draw = ImageDraw.Draw(out)
    for i, inst in enumerate(instances):
        color = INSTANCE_COLORS[i % len(INSTANCE_COLORS)]
        kps = np.asarray(inst["keypoints"], dtype=float).reshape(-1, 3)
        for a, b in SKELETON:
            if a < len(kps) and b < len(kps):
                draw.line([tuple(kps[a, :2]), tuple(kps[b, :2])], fill=color, width=2)
        for x, y, _ in kps:
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], outline=color, fill=color)
    return out


def cmd_infer(cfg: RunConfig, checkpoint, image_path, out_path, force: bool = False) -> dict:
    if image_path is None or out_path is None:
        raise CommandError("--image and --out are required")
    out = Path(out_path)
    json_path = out.with_suffix(".json")
    for p in (out, json_path):
        if p.exists() and not force:
            raise CommandError(f"output path {p} already exists; pass --force to overwrite")
    model = _load_model(cfg, checkpoint)
    try:
        original = Image.open(image_path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read image {image_path}: {exc}") from exc
    w_in, h_in = cfg.model.input_size
    unit = cfg.model.heatmap_stride * 2 ** (cfg.model.num_branches - 1)
    resized = _resize_short_side(original, min(w_in, h_in), unit)
    arr = np.asarray(resized, dtype=float).transpose(2, 0, 1) / 255.0
    instances = infer_image(model, arr, cfg.decode, cfg.tta)
    sx = original.size[0] / resized.size[0]
    sy = original.size[1] / resized.size[1]
    results = []
    for inst in instances:
        r = instance_to_result(0, inst)
        kps = np.asarray(r["keypoints"]).reshape(-1, 3)
        kps[:, 0] *= sx
        kps[:, 1] *= sy
        r["keypoints"] = [round(float(v), 6) for v in kps.reshape(-1)]
        del r["image_id"]
        results.append(r)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        draw_overlay(original, results).save(out)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot write overlay {out}: {exc}") from exc
    doc = {"schema_version": SCHEMA_VERSION, "image": str(image_path), "instances": results}
    _write_json(json_path, doc)
    print(f"{len(results)} instances; overlay {out}, instances {json_path}")
    return doc


def cmd_gradcheck(cfg: RunConfig | None = None) -> int:
    rows = gc.run_checks(gc.CHECKS)
    for r in rows:
        print(gc.format_row(*r))
    return EXIT_OK if all(r[3] for r in rows) else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posegraph", description="Bottom-up multi-person pose estimation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
        return sp

    s = common(sub.add_parser("synth", help="render a synthetic dataset"))
    s.add_argument("--out", help="dataset directory to create")

    s = common(sub.add_parser("train", help="train a model"))
    s.add_argument("--data", help="dataset root or train split directory")
    s.add_argument("--out", help="run directory for checkpoint and log")
    s.add_argument("--checkpoint", help="resume from this checkpoint")

    for name, helptext in (("eval", "evaluate a checkpoint"), ("infer", "run on one image and draw overlays")):
        s = common(sub.add_parser(name, help=helptext))
        s.add_argument("--checkpoint", help="checkpoint manifest (.json)")
        s.add_argument("--out", help="output path")
        s.add_argument("--flip", action="store_true", help="average with the horizontally flipped image")
        s.add_argument("--scales", help="comma-separated test scales, e.g. 0.5,1,2")
        if name == "eval":
            s.add_argument("--data", help="dataset root or eval split directory")
        else:
            s.add_argument("--image", help="input image")
            s.add_argument("--force", action="store_true", help="overwrite existing outputs")

    common(sub.add_parser("gradcheck", help="finite-difference gradient checks"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config)
        if args.command in ("eval", "infer"):
            cfg = _apply_tta_flags(cfg, args)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out, args.checkpoint)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.data, args.out)
        elif args.command == "infer":
            cmd_infer(cfg, args.checkpoint, args.image, args.out, args.force)
        elif args.command == "gradcheck":
            return cmd_gradcheck(cfg)
    except (ConfigError, CheckpointError, CommandError, FileNotFoundError, ValueError) as exc:
        print(f"posegraph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"posegraph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
