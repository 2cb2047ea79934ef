"""Count metrics and prediction export."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import pnm
from .data import Scene
from .model import ArchConfig, ModelParams, forward, integrate_count
from .tensor import Tensor, no_grad

OVERLAY_IMAGE_WEIGHT = 0.3
DENSITY_SCALE_KEY = "density_max"


@dataclass
class EvalRow:
    id: str
    gt_count: float
    est_count: float

    @property
    def abs_error(self) -> float:
        return abs(self.gt_count - self.est_count)


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mae: float
    mse: float

    @property
    def n(self) -> int:
        return len(self.rows)

    def summary(self) -> str:
        return f"MAE={self.mae!r} MSE={self.mse!r}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(("id", "gt_count", "est_count", "abs_error"))
        for r in self.rows:
            wr.writerow((r.id, repr(r.gt_count), repr(r.est_count), repr(r.abs_error)))
        return buf.getvalue()


def count_metrics(gt_counts, est_counts) -> tuple[float, float]:
    """MAE and root-mean-square error over paired counts."""
    z = np.asarray(gt_counts, dtype=np.float64)
    e = np.asarray(est_counts, dtype=np.float64)
    if z.shape != e.shape:
        raise ValueError(f"count arrays differ in shape: {z.shape} vs {e.shape}")
    if z.size == 0:
        raise ValueError("no counts to score")
    d = z - e
    return float(np.mean(np.abs(d))), float(math.sqrt(np.mean(d * d)))


def report_from_counts(ids, gt_counts, est_counts) -> EvalReport:
    rows = sorted(
        (EvalRow(str(i), float(z), float(e)) for i, z, e in zip(ids, gt_counts, est_counts)),
        key=lambda r: r.id,
    )
    mae, mse = count_metrics([r.gt_count for r in rows], [r.est_count for r in rows])
    return EvalReport(rows, mae, mse)


def estimate_count(image: np.ndarray, params: ModelParams, config: ArchConfig) -> float:
    with no_grad():
        return integrate_count(forward(Tensor(image), params, config).final_density)


def evaluate(scenes: list[Scene], params: ModelParams, config: ArchConfig) -> EvalReport:
    if not scenes:
        raise ValueError("evaluate() needs at least one scene")
    est = [estimate_count(s.image, params, config) for s in scenes]
    return report_from_counts([s.id for s in scenes], [s.count for s in scenes], est)


def colorize(conf: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) ramp, returned as [3,H,W] floats."""
    c = np.clip(conf, 0.0, 1.0)
    return np.stack([c, np.zeros_like(c), 1.0 - c])


def upsample_nearest(a: np.ndarray, factor: int, h: int, w: int) -> np.ndarray:
    return np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)[:h, :w]


def overlay(image: np.ndarray, conf: np.ndarray, factor: int) -> np.ndarray:
    _, h, w = image.shape
    base = image if image.shape[0] == 3 else np.repeat(image, 3, axis=0)
    heat = colorize(upsample_nearest(conf, factor, h, w))
    return OVERLAY_IMAGE_WEIGHT * base + (1.0 - OVERLAY_IMAGE_WEIGHT) * heat


def density_raster(density: np.ndarray) -> tuple[np.ndarray, float]:
    """16-bit raster scaled so the maximum maps to 65535, plus that maximum."""
    peak = float(density.max()) if density.size else 0.0
    if peak <= 0.0:
        return np.zeros(density.shape, dtype=np.int64), 0.0
    return np.floor(density / peak * 65535.0 + 0.5).astype(np.int64), peak


def density_csv(density: np.ndarray) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("row", "col", "value"))
    for (r, c), v in np.ndenumerate(density):
        wr.writerow((r, c, repr(float(v))))
    return buf.getvalue()


def read_density_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    h = max(int(r["row"]) for r in rows) + 1
    w = max(int(r["col"]) for r in rows) + 1
    out = np.zeros((h, w))
    for r in rows:
        out[int(r["row"]), int(r["col"])] = float(r["value"])
    return out


def predict(image_path, checkpoint_path, out_dir) -> float:
    """Run one image through a checkpoint and write the export files.

    Writes ``density.pgm`` (with the scale recorded as a header comment),
    ``density.csv``, ``confidence.pgm`` and ``overlay.ppm``; returns the count.
    """
    for p in (image_path, checkpoint_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"no such file: {p}")
    cp = ckpt.load(checkpoint_path)
    image = pnm.read_image(image_path)
    if image.shape[0] != cp.arch.in_channels:
        if cp.arch.in_channels == 1:
            image = image.mean(axis=0, keepdims=True)
        else:
            image = np.repeat(image[:1], cp.arch.in_channels, axis=0)
    with no_grad():
        out = forward(Tensor(image), cp.params, cp.arch)
    density = out.final_density.data[0]
    count = integrate_count(density)

    os.makedirs(out_dir, exist_ok=True)
    raster, peak = density_raster(density)
    pnm.write_pnm(os.path.join(out_dir, "density.pgm"), raster, 65535, [f"{DENSITY_SCALE_KEY}={peak!r}"])
    with open(os.path.join(out_dir, "density.csv"), "w", newline="") as fh:
        fh.write(density_csv(density))
    if out.confidence is not None:
        conf = out.confidence.data[0]
        pnm.write_image(os.path.join(out_dir, "confidence.pgm"), conf[None])
        pnm.write_image(os.path.join(out_dir, "overlay.ppm"), overlay(image, conf, cp.arch.divisor))
    return count
