"""Supervision targets built from dot annotations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

KERNEL_SIZE = 15
KERNEL_SIGMA = 4.0


class DegenerateRangeError(ValueError):
    """All training counts are equal, so equal-width bins cannot be formed."""


@dataclass
class DotAnnotation:
    """Head positions as (x, y) = (column, row) in full-resolution pixels."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    clipped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        self.points = pts.reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def clipped_to(cls, points, height: int, width: int) -> "DotAnnotation":
        """Build an annotation, clamping out-of-bounds points onto the image."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        lo = np.zeros(2)
        hi = np.array([width - 1, height - 1], dtype=np.float64)
        inside = np.all((pts >= lo) & (pts <= hi), axis=1)
        n_out = int((~inside).sum())
        if n_out:
            log.warning("clipped %d annotation point(s) into a %dx%d image", n_out, height, width)
        return cls(np.clip(pts, lo, hi), clipped=n_out)


@dataclass
class DensityMap:
    values: np.ndarray
    resolution_divisor: int = 1

    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class ConfidenceMask:
    values: np.ndarray
    resolution_divisor: int = 1


@dataclass
class GroupBins:
    edges: np.ndarray
    single_group: bool = False

    @property
    def K(self) -> int:
        return len(self.edges) - 1


def round_half_up(v) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def pixel_of(points: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Rounded (row, col) indices of points, clamped into the raster."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cols = np.clip(round_half_up(pts[:, 0]), 0, width - 1)
    rows = np.clip(round_half_up(pts[:, 1]), 0, height - 1)
    return rows, cols


def gaussian_kernel(size: int = KERNEL_SIZE, sigma: float = KERNEL_SIGMA) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _paste_window(center: int, r: int, n: int) -> tuple[int, int, int, int]:
    lo, hi = center - r, center + r + 1
    return max(lo, 0), min(hi, n), max(lo, 0) - lo, min(hi, n) - lo


def render_density(
    annotation: DotAnnotation,
    height: int,
    width: int,
    size: int = KERNEL_SIZE,
    sigma: float = KERNEL_SIGMA,
) -> DensityMap:
    """Sum of normalized Gaussians at each point; border-clipped kernels are renormalized."""
    if height < 1 or width < 1:
        raise ValueError(f"raster extents must be positive, got {height}x{width}")
    kernel = gaussian_kernel(size, sigma)
    r = size // 2
    out = np.zeros((height, width))
    rows, cols = pixel_of(annotation.points, height, width)
    for y, x in zip(rows, cols):
        y0, y1, ky0, ky1 = _paste_window(int(y), r, height)
        x0, x1, kx0, kx1 = _paste_window(int(x), r, width)
        patch = kernel[ky0:ky1, kx0:kx1]
        if patch.shape != kernel.shape:
            patch = patch / patch.sum()
        out[y0:y1, x0:x1] += patch
    return DensityMap(out)


def render_mask(annotation: DotAnnotation, height: int, width: int, size: int = KERNEL_SIZE) -> ConfidenceMask:
    """OR of size x size ones templates centred on each point."""
    if height < 1 or width < 1:
        raise ValueError(f"raster extents must be positive, got {height}x{width}")
    r = size // 2
    out = np.zeros((height, width))
    rows, cols = pixel_of(annotation.points, height, width)
    for y, x in zip(rows, cols):
        y0, y1, _, _ = _paste_window(int(y), r, height)
        x0, x1, _, _ = _paste_window(int(x), r, width)
        out[y0:y1, x0:x1] = 1.0
    return ConfidenceMask(out)


def _block_reduce(values: np.ndarray, factor: int, reducer) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return values.copy()
    h, w = values.shape
    hp, wp = -(-h // factor) * factor, -(-w // factor) * factor
    padded = np.zeros((hp, wp))
    padded[:h, :w] = values
    blocks = padded.reshape(hp // factor, factor, wp // factor, factor)
    return reducer(blocks, axis=(1, 3))


def downsample_density(d: DensityMap, factor: int) -> DensityMap:
    """Non-overlapping block sums; partial trailing blocks are summed as they are."""
    return DensityMap(_block_reduce(d.values, factor, np.sum), d.resolution_divisor * factor)


def downsample_mask(m: ConfidenceMask, factor: int) -> ConfidenceMask:
    """Non-overlapping block max, so any covered pixel keeps its block at 1."""
    return ConfidenceMask(_block_reduce(m.values, factor, np.max), m.resolution_divisor * factor)


def compute_bins(train_counts, K: int = 5) -> GroupBins:
    counts = np.asarray(list(train_counts), dtype=np.float64)
    if counts.size == 0:
        raise ValueError("compute_bins needs at least one count")
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    lo, hi = float(counts.min()), float(counts.max())
    if lo == hi:
        raise DegenerateRangeError(f"all {counts.size} training counts equal {lo:g}")
    return GroupBins(np.linspace(lo, hi, K + 1))


def single_group_bins(count: float, K: int = 5) -> GroupBins:
    """Fallback when every training count is identical: every count maps to group 0."""
    return GroupBins(np.linspace(count, count + 1.0, K + 1), single_group=True)


def quantize_group(count: float, bins: GroupBins) -> int:
    if bins.single_group:
        return 0
    lo, hi = float(bins.edges[0]), float(bins.edges[-1])
    K = bins.K
    width = (hi - lo) / K
    idx = math.floor((count - lo) / width)
    return int(min(K - 1, max(0, idx)))
