"""Command-line entry point: synth, gt, train, eval, predict, gradcheck.

Settings resolve as command-line flag, then ``--config`` JSON file, then the
built-in default. Exit status is 0 on success, 1 on a runtime failure and 2
on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evaluation, gradsuite, pnm
from . import groundtruth as gt
from .data import IngestionError, SynthConfig, load_dataset, load_scene, make_dataset, write_dataset
from .model import ArchConfig
from .training import TrainConfig, TrainingDiverged, train, trace_csv

log = logging.getLogger("catcnn")


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return cfg


def _merge(cls, file_cfg: dict, flags: dict):
    """Build a dataclass from defaults <- config file <- explicit flags."""
    names = {f.name for f in fields(cls)}
    unknown = set(file_cfg) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys in config: {', '.join(sorted(unknown))}")
    merged = dict(file_cfg)
    merged.update({k: v for k, v in flags.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _pair(text: str, kind=float):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    return tuple(kind(p) for p in parts)


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _merge(
        SynthConfig,
        _load_config(args.config),
        {
            "seed": args.seed,
            "height": args.height,
            "width": args.width,
            "channels": args.channels,
            "count_range": args.count_range,
            "head_radius_range": args.radius_range,
            "background": args.background,
            "distractor_density": args.distractor_density,
        },
    )
    scenes, manifest = make_dataset(cfg, args.scenes)
    write_dataset(args.out, scenes, manifest)
    print(manifest.stats_line())
    return 0


def cmd_gt(args) -> int:
    scene = load_scene(args.image, args.annotation)
    h, w = scene.height, scene.width
    density = gt.downsample_density(gt.render_density(scene.annotation, h, w), args.divisor)
    mask = gt.downsample_mask(gt.render_mask(scene.annotation, h, w), args.divisor)
    os.makedirs(args.out, exist_ok=True)
    raster, peak = evaluation.density_raster(density.values)
    pnm.write_pnm(
        os.path.join(args.out, "density.pgm"), raster, 65535, [f"{evaluation.DENSITY_SCALE_KEY}={peak!r}"]
    )
    Path(args.out, "density.csv").write_text(evaluation.density_csv(density.values))
    pnm.write_pnm(os.path.join(args.out, "mask.pgm"), mask.values.astype(np.int64) * 255, 255)
    print(f"count={density.count()!r}")
    return 0


def _train_config(args) -> TrainConfig:
    file_cfg = _load_config(args.config)
    arch_file = file_cfg.pop("arch", {})
    arch = _merge(
        ArchConfig,
        arch_file,
        {
            "dilation_set": args.dilations,
            "K": args.groups,
            "use_confidence": args.use_confidence,
            "use_cross_layer": args.use_cross_layer,
            "fm_output": args.fm_output,
        },
    )
    flags = {
        "seed": args.seed,
        "epochs": args.epochs,
        "max_steps": args.steps,
        "lr": args.lr,
        "lambda1": args.lambda1,
        "lambda2": args.lambda2,
        "checkpoint_every": args.checkpoint_every,
    }
    cfg = _merge(TrainConfig, {**file_cfg, "arch": arch}, flags)
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    scenes = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"train": {k: v for k, v in cfg.__dict__.items() if k != "arch"}}

    def on_checkpoint(step, params, bins):
        ckpt.save(out / f"step_{step:06d}.ckpt", params, cfg.arch, bins, extra)

    result = train(scenes, cfg, on_checkpoint if cfg.checkpoint_every else None)
    ckpt.save(out / "model.ckpt", result.params, cfg.arch, result.bins, extra)
    (out / "loss.csv").write_text(trace_csv(result.trace))
    last = result.trace[-1]
    print(f"steps={len(result.trace)} l_whole={last.l_whole!r}")
    return 0


def cmd_eval(args) -> int:
    cp = ckpt.load(args.checkpoint)
    scenes = load_dataset(args.data)
    report = evaluation.evaluate(scenes, cp.params, cp.arch)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_csv())
    print(report.summary())
    return 0


def cmd_predict(args) -> int:
    count = evaluation.predict(args.image, args.checkpoint, args.out)
    print(f"count={count!r}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = gradsuite.run_suite(args.seed, args.instances)
    for line in gradsuite.format_report(worst):
        print(line)
    return 0 if all(v < gradsuite.THRESHOLD for v in worst.values()) else 1


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catcnn", description="Confidence-gated crowd counting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        sp.add_argument("--config", help="JSON file with settings; explicit flags override it")

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    common(s)
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--scenes", type=int, default=4, help="number of scenes (default 4)")
    s.add_argument("--height", type=int, help="image height in pixels (default 64)")
    s.add_argument("--width", type=int, help="image width in pixels (default 64)")
    s.add_argument("--channels", type=int, choices=(1, 3), help="1 for PGM, 3 for PPM output")
    s.add_argument("--count-range", type=lambda t: _pair(t, int), metavar="MIN,MAX", help="heads per scene (default 5,20)")
    s.add_argument("--radius-range", type=_pair, metavar="MIN,MAX", help="head radius in px (default 2,3.5)")
    s.add_argument("--background", choices=("flat", "gradient", "clutter"), help="background style")
    s.add_argument("--distractor-density", type=float, help="unannotated head-like blobs per 1024 px^2")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gt", help="render density and mask targets for one annotated image")
    common(s)
    s.add_argument("--image", required=True, help="PGM/PPM/PNG image")
    s.add_argument("--annotation", required=True, help="point annotation file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--divisor", type=int, default=4, help="downsampling factor (default 4)")
    s.set_defaults(func=cmd_gt)

    s = sub.add_parser("train", help="train on a dataset directory")
    common(s)
    s.add_argument("--data", required=True, help="dataset directory written by synth")
    s.add_argument("--out", required=True, help="directory for model.ckpt and loss.csv")
    s.add_argument("--epochs", type=int, help="passes over the scenes (default 1)")
    s.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    s.add_argument("--lr", type=float, help="Adam learning rate (default 1e-4)")
    s.add_argument("--lambda1", type=float, help="confidence loss weight (default 2)")
    s.add_argument("--lambda2", type=float, help="classification loss weight (default 0.01)")
    s.add_argument("--checkpoint-every", type=int, help="also save a checkpoint every N steps")
    s.add_argument("--dilations", type=_int_list, metavar="D1,D2,...", help="front-end dilation set (default 1,2,3,4)")
    s.add_argument("--groups", type=int, help="number of count groups K (default 5)")
    s.add_argument("--use-confidence", type=_bool, metavar="BOOL", help="enable the confidence gate (default true)")
    s.add_argument("--use-cross-layer", type=_bool, metavar="BOOL", help="enable the cross-layer fusion (default true)")
    s.add_argument("--fm-output", choices=("fm1_only", "fm2_only", "both"), help="features fed to the heads")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    common(s)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--out", help="write per-scene rows to this CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="count one image and export density/confidence rasters")
    common(s)
    s.add_argument("--image", required=True, help="PGM/PPM/PNG image")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    common(s)
    s.add_argument("--instances", type=int, default=gradsuite.INSTANCES, help="random instances per op (default 5)")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None and args.command in ("gradcheck",):
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"catcnn {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (IngestionError, ckpt.CheckpointError, pnm.PNMError, TrainingDiverged, FileNotFoundError, OSError, ValueError) as e:
        print(f"catcnn {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
