"""Scenes, their on-disk formats, and the synthetic crowd generator.

Annotation files are UTF-8 text with LF line endings::

    count 3
    12.5 40
    30 7.25
    55 60

i.e. a ``count N`` line followed by N ``x y`` lines (x = column, y = row,
decimal reals, full-resolution pixels).  Real benchmark point lists (for
example ShanghaiTech ``.mat`` files) can be transcoded into this format
externally with :func:`annotation_text`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .groundtruth import DotAnnotation
from .pnm import PNMError, read_image, write_image

log = logging.getLogger(__name__)

BACKGROUNDS = ("flat", "gradient", "clutter")
# distractor_density counts clutter blobs per this many pixels of image area
DISTRACTOR_AREA_UNIT = 1024
MANIFEST_HEADER = ("id", "seed", "count")


class IngestionError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray
    annotation: DotAnnotation
    id: str = "scene"

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        if img.ndim != 3 or img.shape[0] not in (1, 3):
            raise ValueError(f"scene image must be [C,H,W] with C in {{1,3}}, got {img.shape}")
        self.image = img

    @property
    def count(self) -> int:
        return len(self.annotation)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class SynthConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    channels: int = 1
    count_range: tuple[int, int] = (5, 20)
    head_radius_range: tuple[float, float] = (2.0, 3.5)
    background: str = "flat"
    distractor_density: float = 0.0

    def __post_init__(self):
        self.count_range = (int(self.count_range[0]), int(self.count_range[1]))
        self.head_radius_range = (float(self.head_radius_range[0]), float(self.head_radius_range[1]))
        if self.count_range[0] < 0 or self.count_range[1] < self.count_range[0]:
            raise ValueError(f"bad count_range {self.count_range}")
        if self.height < 32 or self.width < 32:
            raise ValueError(f"extents must be >= 32, got {self.height}x{self.width}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.distractor_density < 0:
            raise ValueError("distractor_density must be >= 0")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0 < self.head_radius_range[0] <= self.head_radius_range[1]:
            raise ValueError(f"bad head_radius_range {self.head_radius_range}")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# synthesis


def _background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    level = rng.uniform(0.65, 0.85)
    if cfg.background == "flat":
        return np.full((h, w), level)
    if cfg.background == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        return level - 0.1 + 0.2 * ramp
    noise = rng.uniform(-0.1, 0.1, (h + 4, w + 4))
    # 5x5 box blur keeps the texture low-frequency
    k = np.ones(5) / 5
    noise = np.apply_along_axis(lambda r: np.convolve(r, k, "valid"), 1, noise)
    noise = np.apply_along_axis(lambda c: np.convolve(c, k, "valid"), 0, noise)
    return level + noise


def _place_heads(cfg: SynthConfig, rng: np.random.Generator, n: int, radii: np.ndarray) -> np.ndarray:
    pts = np.zeros((n, 2))
    relaxed = 0
    for i in range(n):
        for _ in range(200):
            cand = np.array([rng.uniform(0, cfg.width - 1), rng.uniform(0, cfg.height - 1)])
            if i == 0:
                break
            sep = np.hypot(*(pts[:i] - cand).T)
            if np.all(sep >= radii[:i] + radii[i]):
                break
        else:
            relaxed += 1
        pts[i] = cand
    if relaxed:
        log.warning("relaxed head separation for %d of %d heads", relaxed, n)
    return pts


def _disk_alpha(cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(xx - cx, yy - cy)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def generate_scene(config: SynthConfig, rng: np.random.Generator, scene_id: str = "scene") -> Scene:
    """Dark soft-edged head disks over a background, plus unannotated speckled clutter blobs."""
    h, w = config.height, config.width
    img = _background(config, rng)

    n = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    r_lo, r_hi = config.head_radius_range
    radii = rng.uniform(r_lo, r_hi, n)
    pts = _place_heads(config, rng, n, radii)

    n_clutter = int(round(config.distractor_density * h * w / DISTRACTOR_AREA_UNIT))
    for _ in range(n_clutter):
        cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        r = rng.uniform(1.2 * r_lo, 1.6 * r_hi)
        level = rng.uniform(0.1, 0.3)
        # speckle: roughly half the blob's pixels darken, like foliage
        alpha = _disk_alpha(cx, cy, r, h, w) * (rng.random((h, w)) < 0.5)
        img = img * (1 - alpha) + level * alpha

    for (cx, cy), r in zip(pts, radii):
        level = rng.uniform(0.1, 0.3)
        alpha = _disk_alpha(cx, cy, r, h, w)
        img = img * (1 - alpha) + level * alpha

    img = np.clip(img, 0.0, 1.0)
    if config.channels == 3:
        tint = rng.uniform(0.9, 1.0, 3)
        img = np.clip(img[None] * tint[:, None, None], 0.0, 1.0)
    return Scene(img, DotAnnotation(pts), scene_id)


@dataclass
class Manifest:
    config: SynthConfig
    rows: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def counts(self) -> list[int]:
        return [r[2] for r in self.rows]

    def stats(self) -> dict:
        c = self.counts
        return {
            "num": len(c),
            "range": (min(c), max(c)) if c else (0, 0),
            "average": float(np.mean(c)) if c else 0.0,
            "total": int(sum(c)),
        }

    def stats_line(self) -> str:
        s = self.stats()
        lo, hi = s["range"]
        return f"num={s['num']} range=[{lo},{hi}] average={s['average']:.1f} total={s['total']}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        wr.writerows(self.rows)
        return buf.getvalue()


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def make_dataset(config: SynthConfig, n_scenes: int) -> tuple[list[Scene], Manifest]:
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    scenes = []
    manifest = Manifest(config)
    for i, s in enumerate(scene_seeds(config.seed, n_scenes)):
        scene = generate_scene(config, np.random.default_rng(s), f"scene_{i:04d}")
        scenes.append(scene)
        manifest.rows.append((scene.id, s, scene.count))
    return scenes, manifest


# --------------------------------------------------------------------------
# files


def annotation_text(points) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lines = [f"count {len(pts)}"] + [f"{x!r} {y!r}" for x, y in pts.tolist()]
    return "\n".join(lines) + "\n"


def parse_annotation(text: str, path="<annotation>") -> np.ndarray:
    lines = text.split("\n")
    body = [(i + 1, ln.strip()) for i, ln in enumerate(lines) if ln.strip()]
    if not body:
        return np.zeros((0, 2))
    lineno, head = body[0]
    parts = head.split()
    if len(parts) != 2 or parts[0] != "count":
        raise IngestionError(f"{path}:{lineno}: expected 'count N', got {head!r}")
    try:
        declared = int(parts[1])
    except ValueError:
        raise IngestionError(f"{path}:{lineno}: count {parts[1]!r} is not an integer") from None
    pts = []
    for lineno, ln in body[1:]:
        xy = ln.split()
        if len(xy) != 2:
            raise IngestionError(f"{path}:{lineno}: expected 'x y', got {ln!r}")
        try:
            pts.append((float(xy[0]), float(xy[1])))
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: non-numeric coordinate in {ln!r}") from None
    if len(pts) != declared:
        raise IngestionError(f"{path}: declared count {declared} but found {len(pts)} points")
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def load_scene(image_path, annotation_path) -> Scene:
    try:
        image = read_image(image_path)
    except (OSError, PNMError) as e:
        raise IngestionError(f"{image_path}: cannot read image: {e}") from e
    try:
        text = Path(annotation_path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise IngestionError(f"{annotation_path}: cannot read annotation: {e}") from e
    pts = parse_annotation(text, annotation_path)
    _, h, w = image.shape
    ann = DotAnnotation.clipped_to(pts, h, w)
    return Scene(image, ann, Path(image_path).stem)


def save_scene(scene: Scene, image_path, annotation_path, bits: int = 16) -> None:
    write_image(image_path, scene.image, bits)
    os.makedirs(os.path.dirname(os.path.abspath(annotation_path)), exist_ok=True)
    with open(annotation_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(annotation_text(scene.annotation.points))


def _image_name(scene: Scene) -> str:
    return f"{scene.id}.pgm" if scene.image.shape[0] == 1 else f"{scene.id}.ppm"


def write_dataset(root, scenes: list[Scene], manifest: Manifest | None = None) -> None:
    root = Path(root)
    for s in scenes:
        save_scene(s, root / "images" / _image_name(s), root / "annotations" / f"{s.id}.txt")
    if manifest is None:
        manifest = Manifest(SynthConfig(), [(s.id, 0, s.count) for s in scenes])
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.csv").write_text(manifest.to_csv(), encoding="utf-8")
    (root / "synth.json").write_text(json.dumps(manifest.config.to_dict(), sort_keys=True) + "\n")
    (root / "stats.txt").write_text(manifest.stats_line() + "\n")


def read_manifest(root) -> list[tuple[str, int, int]]:
    path = Path(root) / "manifest.csv"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IngestionError(f"{path}: cannot read manifest: {e}") from e
    rd = csv.reader(io.StringIO(text))
    header = next(rd, None)
    if tuple(header or ()) != MANIFEST_HEADER:
        raise IngestionError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
    rows = []
    for i, row in enumerate(rd, start=2):
        if len(row) != 3:
            raise IngestionError(f"{path}:{i}: expected 3 fields, got {len(row)}")
        rows.append((row[0], int(row[1]), int(row[2])))
    return rows


def load_dataset(root) -> list[Scene]:
    root = Path(root)
    scenes = []
    for sid, _, _ in read_manifest(root):
        img = root / "images" / f"{sid}.pgm"
        if not img.exists():
            img = root / "images" / f"{sid}.ppm"
        scenes.append(load_scene(img, root / "annotations" / f"{sid}.txt"))
    return scenes
