"""The confidence-gated counting network.

Layout of one forward pass::

    image ─► dilated branches ─► trunk (conv, pool, conv[T1], pool, conv[T2])
          ─► cross-layer fusion ─► FM1 ─► AMA + FC + PReLU ─► group logits
                                    └──► FM1 * W_fc[argmax] = FM2
          fm_out ─► 1x1 conv + sigmoid ─► confidence
          fm_out ─► 1x1 conv + ReLU    ─► estimated density
          est * confidence ─► 3x3 conv + ReLU ─► final density
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

FM_OUTPUTS = ("fm1_only", "fm2_only", "both")
INIT_SCHEMES = ("gaussian", "he_hidden")
HEAD_PREFIXES = ("conf.", "den.", "fus.")


@dataclass
class ArchConfig:
    in_channels: int = 1
    base_channels: int = 8
    dilation_set: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    pool_stages: int = 2
    trunk_widths: list[int] = field(default_factory=lambda: [32, 64, 48])
    c1: int = 32
    K: int = 5
    use_confidence: bool = True
    use_cross_layer: bool = True
    fm_output: str = "both"
    init_std: float = 0.01
    init_scheme: str = "he_hidden"

    def __post_init__(self):
        self.dilation_set = [int(d) for d in self.dilation_set]
        self.trunk_widths = [int(w) for w in self.trunk_widths]
        if not self.dilation_set or any(d < 1 for d in self.dilation_set):
            raise ValueError(f"dilation_set must be nonempty positive integers, got {self.dilation_set}")
        if self.pool_stages < 1:
            raise ValueError("pool_stages must be >= 1")
        if len(self.trunk_widths) != self.pool_stages + 1:
            raise ValueError(
                f"need {self.pool_stages + 1} trunk widths for {self.pool_stages} pool stages, "
                f"got {self.trunk_widths}"
            )
        if self.fm_output not in FM_OUTPUTS:
            raise ValueError(f"fm_output must be one of {FM_OUTPUTS}, got {self.fm_output!r}")
        if self.use_cross_layer and self.c1 % 2:
            raise ValueError("c1 must be even when the cross-layer connection is on")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")
        if self.K < 1:
            raise ValueError("K must be positive")

    @property
    def divisor(self) -> int:
        return 2**self.pool_stages

    @property
    def out_channels(self) -> int:
        return 2 * self.c1 if self.fm_output == "both" else self.c1

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Ordered, name-addressable collection of learnable tensors."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.name = name
        t.requires_grad = True
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        self._t[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def values(self):
        return self._t.values()

    def count(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.zero_grad()


def init_params(config: ArchConfig, seed: int = 0) -> ModelParams:
    """Zero-mean Gaussian weights, zero biases, PReLU slope 0.25.

    With ``init_scheme="gaussian"`` every weight has std ``config.init_std``.
    ``"he_hidden"`` keeps that std for the classifier and the three output
    heads but gives hidden convolutions std sqrt(2 / fan_in), so activations
    do not shrink geometrically through the trunk.
    """
    rng = np.random.default_rng(seed)
    p = ModelParams()

    def conv(name: str, c_out: int, c_in: int, k: int) -> None:
        std = config.init_std
        if config.init_scheme == "he_hidden" and not f"{name}.".startswith(HEAD_PREFIXES):
            std = float(np.sqrt(2.0 / (c_in * k * k)))
        p[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)))
        p[f"{name}.bias"] = Tensor(np.zeros(c_out))

    for d in config.dilation_set:
        conv(f"front.d{d}", config.base_channels, config.in_channels, 3)
    c = config.base_channels * len(config.dilation_set)
    for i, w in enumerate(config.trunk_widths):
        conv(f"trunk.{i}", w, c, 3)
        c = w
    t1, t2 = config.trunk_widths[-2], config.trunk_widths[-1]
    if config.use_cross_layer:
        conv("fuse.t1", config.c1 // 2, t1, 1)
        conv("fuse.t2", config.c1 // 2, t2, 1)
    else:
        conv("fuse.t2", config.c1, t2, 1)
    p["cls.fc.weight"] = Tensor(rng.normal(0.0, config.init_std, (config.K, config.c1)))
    p["cls.fc.bias"] = Tensor(np.zeros(config.K))
    p["cls.prelu.slope"] = Tensor(np.array([0.25]))
    if config.use_confidence:
        conv("conf", 1, config.out_channels, 1)
    conv("den", 1, config.out_channels, 1)
    conv("fus", 1, 1, 3)
    return p


@dataclass
class ForwardOutput:
    class_logits: Tensor
    predicted: int
    fm1: Tensor
    fm2: Tensor
    confidence: Tensor | None
    est_density: Tensor
    gated: Tensor
    final_density: Tensor


def _conv(x: Tensor, params: ModelParams, name: str, dilation: int = 1) -> Tensor:
    return T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], dilation)


def classify_groups(fm1: Tensor, params: ModelParams) -> Tensor:
    """AMA pooling (4x4 adaptive max, then global mean), FC and PReLU."""
    _, h, w = fm1.shape
    v = T.avg_pool_all(T.adaptive_max_pool(fm1, min(h, 4), min(w, 4)))
    return T.prelu(T.linear(v, params["cls.fc.weight"], params["cls.fc.bias"]), params["cls.prelu.slope"])


def map_class_weights(fm1: Tensor, fc_weight: Tensor, predicted: int) -> Tensor:
    """Scale channel c of FM1 by fc_weight[predicted, c]."""
    k = fc_weight.shape[0]
    if not 0 <= predicted < k:
        raise ValueError(f"predicted class {predicted} outside [0, {k})")
    return T.scale_channels(fm1, T.take_row(fc_weight, int(predicted)))


def mih_forward(image: Tensor, params: ModelParams, config: ArchConfig, predicted: int | None = None):
    """Feature extractor and group classifier.

    Returns ``(fm1, logits, fm2, predicted, fm_out)``. ``predicted`` overrides
    the argmax selection, which is how gradient checks hold it fixed.
    """
    branches = [T.relu(_conv(image, params, f"front.d{d}", d)) for d in config.dilation_set]
    x = branches[0]
    for b in branches[1:]:
        x = T.concat_channels(x, b)

    taps = []
    for i in range(config.pool_stages + 1):
        if i:
            x = T.maxpool2(x)
        x = T.relu(_conv(x, params, f"trunk.{i}"))
        taps.append(x)
    t1, t2 = taps[-2], taps[-1]

    if config.use_cross_layer:
        a = T.relu(_conv(T.maxpool2(t1), params, "fuse.t1"))
        b = T.relu(_conv(t2, params, "fuse.t2"))
        fm1 = T.concat_channels(a, b)
    else:
        fm1 = T.relu(_conv(t2, params, "fuse.t2"))

    logits = classify_groups(fm1, params)
    if predicted is None:
        predicted = int(np.argmax(logits.data))
    fm2 = map_class_weights(fm1, params["cls.fc.weight"], predicted)

    if config.fm_output == "fm1_only":
        fm_out = fm1
    elif config.fm_output == "fm2_only":
        fm_out = fm2
    else:
        fm_out = T.concat_channels(fm1, fm2)
    return fm1, logits, fm2, predicted, fm_out


def confidence_head(features: Tensor, params: ModelParams) -> Tensor:
    return T.sigmoid(_conv(features, params, "conf"))


def density_head(features: Tensor, params: ModelParams) -> Tensor:
    return T.relu(_conv(features, params, "den"))


def fusion_head(
    est_density: Tensor,
    confidence: Tensor | None,
    params: ModelParams,
    use_confidence: bool = True,
) -> tuple[Tensor, Tensor]:
    """Returns ``(final_density, gated)`` where ``gated`` feeds the post-fusion conv."""
    if use_confidence:
        if confidence is None:
            raise ValueError("fusion_head: use_confidence is set but no confidence map was given")
        if confidence.shape != est_density.shape:
            raise T.ShapeError(
                f"fusion_head: confidence {confidence.shape} vs density {est_density.shape}"
            )
        gated = T.mul_elementwise(est_density, confidence)
    else:
        gated = est_density
    return T.relu(_conv(gated, params, "fus")), gated


def forward(
    image,
    params: ModelParams,
    config: ArchConfig,
    predicted: int | None = None,
    force_confidence: float | None = None,
) -> ForwardOutput:
    """Full network pass.

    ``force_confidence`` replaces the confidence map with a constant raster
    (used to probe the gating path); the confidence head is still evaluated
    and reported.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.data.ndim == 2:
        image = Tensor(image.data[None])
    fm1, logits, fm2, predicted, fm_out = mih_forward(image, params, config, predicted)
    est = density_head(fm_out, params)
    conf = confidence_head(fm_out, params) if config.use_confidence else None
    gate = conf
    if force_confidence is not None and config.use_confidence:
        gate = Tensor(np.full(est.shape, float(force_confidence)))
    final, gated = fusion_head(est, gate, params, config.use_confidence)
    return ForwardOutput(logits, predicted, fm1, fm2, conf, est, gated, final)


def integrate_count(density) -> float:
    data = density.data if isinstance(density, Tensor) else np.asarray(density)
    return float(data.sum())


def output_extent(h: int, w: int, config: ArchConfig) -> tuple[int, int]:
    for _ in range(config.pool_stages):
        h, w = -(-h // 2), -(-w // 2)
    return h, w
