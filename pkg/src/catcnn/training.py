"""Loss terms, Adam, patch augmentation and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import groundtruth as gt
from . import tensor as T
from .data import Scene
from .model import ArchConfig, ModelParams, forward, init_params
from .tensor import Tensor

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
EMPTY_MASK_WEIGHT = 1e-6
TRACE_HEADER = ("step", "l_fus", "l_den", "l_con", "l_mul", "l_whole")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 2.0
    lambda2: float = 1e-2
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    crop_patches: int = 9
    flip_p: float = 0.5
    noise_p: float = 0.5
    noise_amplitude: float = 0.04
    checkpoint_every: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        for name in ("lambda1", "lambda2", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("flip_p", "noise_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.crop_patches < 1:
            raise ValueError("crop_patches must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LossBreakdown:
    l_fus: float
    l_den: float
    l_con: float
    l_mul: float
    l_whole: float

    def row(self, step: int) -> list[str]:
        return [str(step)] + [repr(float(v)) for v in (self.l_fus, self.l_den, self.l_con, self.l_mul, self.l_whole)]


# --------------------------------------------------------------------------
# loss terms


def loss_cross_entropy(logits: Tensor, target_class: int) -> Tensor:
    """Negative log softmax probability of ``target_class``."""
    k = logits.shape[0]
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} outside [0, {k})")
    z = logits.data - logits.data.max()
    logsum = math.log(np.exp(z).sum())
    p = np.exp(z - logsum)
    out = np.array(logsum - z[target_class])

    def _backward(g):
        d = p.copy()
        d[target_class] -= 1.0
        T._accum(logits, float(g) * d)

    return T._result(out, (logits,), _backward)


def bce_weights(mask) -> np.ndarray:
    """Per-pixel weights: foreground 1 - f, background f, with f the foreground fraction."""
    y = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    f = y.sum() / y.size
    if f == 0:
        return np.full(y.shape, EMPTY_MASK_WEIGHT)
    # (1 - 2f)y + f on a binary mask, written as a select so the map is
    # exactly two-valued (the affine form can be off by an ulp)
    return np.where(y > 0.5, 1.0 - f, f)


def loss_weighted_bce(confidence: Tensor, mask) -> Tensor:
    y = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if y.shape != confidence.shape:
        y = y.reshape(confidence.shape) if y.size == confidence.data.size else None
    if y is None:
        raise T.ShapeError(f"weighted BCE: mask shape does not match confidence {confidence.shape}")
    w = bce_weights(y)
    raw = confidence.data
    x = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = x.size
    out = np.array(-(w * (y * np.log(x) + (1.0 - y) * np.log(1.0 - x))).sum() / n)
    inside = (raw > BCE_CLAMP) & (raw < 1.0 - BCE_CLAMP)

    def _backward(g):
        d = -w * (y / x - (1.0 - y) / (1.0 - x)) / n
        T._accum(confidence, float(g) * d * inside)

    return T._result(out, (confidence,), _backward)


def loss_euclidean(pred: Tensor, target) -> Tensor:
    """0.5 * sum of squared differences (one sample per step)."""
    t = np.asarray(getattr(target, "values", target), dtype=np.float64)
    if t.shape != pred.shape:
        if t.size != pred.data.size:
            raise T.ShapeError(f"euclidean loss: target {t.shape} vs prediction {pred.shape}")
        t = t.reshape(pred.shape)
    diff = pred.data - t
    out = np.array(0.5 * float((diff * diff).sum()))

    def _backward(g):
        T._accum(pred, float(g) * diff)

    return T._result(out, (pred,), _backward)


def loss_whole(l_fus: Tensor, l_den: Tensor, l_con: Tensor, l_mul: Tensor, config: TrainConfig):
    """Weighted joint objective; returns the graph node and a float breakdown."""
    total = l_fus + l_den + config.lambda1 * l_con + config.lambda2 * l_mul
    parts = LossBreakdown(l_fus.item(), l_den.item(), l_con.item(), l_mul.item(), total.item())
    return total, parts


def combine_breakdown(l_fus: float, l_den: float, l_con: float, l_mul: float, config: TrainConfig) -> LossBreakdown:
    whole = l_fus + l_den + config.lambda1 * l_con + config.lambda2 * l_mul
    return LossBreakdown(l_fus, l_den, l_con, l_mul, whole)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update from the accumulated grads, then zero them."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        p.zero_grad()


# --------------------------------------------------------------------------
# augmentation


@dataclass
class Sample:
    """One training patch with targets already at network output resolution."""

    image: np.ndarray
    points: np.ndarray
    density: np.ndarray
    mask: np.ndarray
    count: int
    group: int = 0
    source: str = ""


def make_targets(points: np.ndarray, h: int, w: int, divisor: int) -> tuple[np.ndarray, np.ndarray]:
    ann = gt.DotAnnotation(points)
    density = gt.downsample_density(gt.render_density(ann, h, w), divisor).values
    mask = gt.downsample_mask(gt.render_mask(ann, h, w), divisor).values
    return density, mask


def augment(scene: Scene, rng: np.random.Generator, config: TrainConfig | None = None, divisor: int = 4) -> list[Sample]:
    """Random quarter-area crops with optional horizontal flip and uniform noise.

    Targets are rendered per patch from the retained points.
    """
    config = config or TrainConfig()
    c, h, w = scene.image.shape
    if h < 8 or w < 8:
        log.warning("scene %s is %dx%d, too small to crop; skipped", scene.id, h, w)
        return []
    ph, pw = h // 2, w // 2
    pts = scene.annotation.points
    samples = []
    for _ in range(config.crop_patches):
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        img = scene.image[:, top:top + ph, left:left + pw].copy()
        local = pts - np.array([left, top], dtype=np.float64)
        r = gt.round_half_up(local)
        keep = (r[:, 0] >= 0) & (r[:, 0] < pw) & (r[:, 1] >= 0) & (r[:, 1] < ph)
        local = local[keep]
        if rng.random() < config.flip_p:
            img = img[:, :, ::-1].copy()
            local[:, 0] = pw - 1 - local[:, 0]
        if rng.random() < config.noise_p:
            a = config.noise_amplitude
            img = np.clip(img + rng.uniform(-a, a, img.shape), 0.0, 1.0)
        density, mask = make_targets(local, ph, pw, divisor)
        samples.append(Sample(img, local, density, mask, len(local), source=scene.id))
    return samples


def scene_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent augmentation stream for one visit of one scene."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


# --------------------------------------------------------------------------
# loop


def sample_losses(sample: Sample, params: ModelParams, config: TrainConfig, predicted: int | None = None):
    out = forward(sample.image, params, config.arch, predicted=predicted)
    l_fus = loss_euclidean(out.final_density, sample.density)
    l_den = loss_euclidean(out.est_density, sample.density)
    if out.confidence is not None:
        l_con = loss_weighted_bce(out.confidence, sample.mask)
    else:
        l_con = Tensor(0.0)
    l_mul = loss_cross_entropy(out.class_logits, sample.group)
    total, parts = loss_whole(l_fus, l_den, l_con, l_mul, config)
    return total, parts, out


def _check_finite(parts: LossBreakdown, step: int, source: str) -> None:
    for name in ("l_fus", "l_den", "l_con", "l_mul", "l_whole"):
        v = getattr(parts, name)
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite {name}={v!r} at step {step} (sample from {source!r})")


def training_bins(dataset: list[Scene], K: int) -> gt.GroupBins:
    counts = [scene.count for scene in dataset]
    try:
        return gt.compute_bins(counts, K)
    except gt.DegenerateRangeError as e:
        log.warning("%s; falling back to single-group mode", e)
        return gt.single_group_bins(counts[0], K)


def patch_group(sample: Sample, scene: Scene, bins: gt.GroupBins) -> int:
    """Group of a patch, judged by its count rescaled to the full scene area."""
    ratio = (scene.height * scene.width) / (sample.image.shape[1] * sample.image.shape[2])
    return gt.quantize_group(sample.count * ratio, bins)


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[LossBreakdown]
    bins: gt.GroupBins
    config: TrainConfig


def train(
    dataset: list[Scene],
    config: TrainConfig,
    on_checkpoint: Callable[[int, ModelParams, gt.GroupBins], None] | None = None,
) -> TrainResult:
    """Seeded joint training with batch size 1.

    Each epoch visits the scenes in a shuffled order; every visit crops a
    fresh set of augmented patches and takes one step per patch.  Group bins
    come from the scene counts before the loop starts.
    """
    if not dataset:
        raise ValueError("train() needs a nonempty dataset")
    bins = training_bins(dataset, config.arch.K)
    params = init_params(config.arch, config.seed)
    state = AdamState()
    shuffle = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    divisor = config.arch.divisor
    trace: list[LossBreakdown] = []
    limit = config.max_steps if config.max_steps is not None else config.epochs * len(dataset) * config.crop_patches
    step = 0
    epoch = 0
    while step < limit:
        order = shuffle.permutation(len(dataset))
        visited = 0
        for idx in order:
            scene = dataset[idx]
            for sample in augment(scene, scene_stream(config.seed, epoch, int(idx)), config, divisor):
                if step >= limit:
                    break
                sample.group = patch_group(sample, scene, bins)
                total, parts, _ = sample_losses(sample, params, config)
                step += 1
                visited += 1
                _check_finite(parts, step, sample.source)
                T.backward(total)
                adam_step(params, state, config)
                trace.append(parts)
                if on_checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0:
                    on_checkpoint(step, params, bins)
            if step >= limit:
                break
        if not visited:
            raise ValueError("no training samples: every scene was too small to crop")
        epoch += 1
    return TrainResult(params, trace, bins, config)


def trace_csv(trace: list[LossBreakdown]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRACE_HEADER)
    for i, parts in enumerate(trace, start=1):
        wr.writerow(parts.row(i))
    return buf.getvalue()
