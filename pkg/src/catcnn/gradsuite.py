"""Finite-difference checks over every differentiable op and loss term.

Each check draws a fresh random instance, reduces the op output to a scalar
through a quadratic probe against a random target, and reports the worst
relative error over all leaves. Inputs to piecewise ops (ReLU, PReLU, max
pooling, loss clamps) are drawn away from their kinks and ties, since a
central difference straddling a kink measures the wrong one-sided slope.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from . import training as tr
from .model import ArchConfig, init_params
from .tensor import Tensor

THRESHOLD = 1e-4
INSTANCES = 5


def _leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1) -> np.ndarray:
    mag = rng.uniform(margin, 1.0, shape)
    return mag * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape) -> np.ndarray:
    """Values with pairwise gaps of at least 0.05, so max pooling has no near-ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape) - 0.025 * n


def _check(build: Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]) -> float:
    f, leaves = build()
    return max(T.grad_check(f, leaf) for leaf in leaves)


def _conv_case(rng, dilation: int, k: int):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(5, 10)), int(rng.integers(5, 10))
    x = _leaf(rng.normal(size=(c_in, h, w)))
    wt = _leaf(rng.normal(size=(c_out, c_in, k, k)))
    b = _leaf(rng.normal(size=c_out))
    target = rng.normal(size=(c_out, h, w))
    return (lambda: tr.loss_euclidean(T.conv2d(x, wt, b, dilation), target)), [x, wt, b]


def _unary(rng, op, values):
    x = _leaf(values)
    with T.no_grad():
        target = rng.normal(size=op(x).shape)
    return (lambda: tr.loss_euclidean(op(x), target)), [x]


def _cases(rng) -> dict[str, Callable[[], tuple]]:
    def shape3():
        return (int(rng.integers(1, 4)), int(rng.integers(3, 9)), int(rng.integers(3, 9)))

    def mul():
        c, h, w = shape3()
        a = _leaf(rng.normal(size=(c, h, w)))
        b = _leaf(rng.normal(size=(1, h, w)))
        t = rng.normal(size=(c, h, w))
        return (lambda: tr.loss_euclidean(T.mul_elementwise(a, b), t)), [a, b]

    def add():
        s = shape3()
        a, b = _leaf(rng.normal(size=s)), _leaf(rng.normal(size=s))
        t = rng.normal(size=s)
        return (lambda: tr.loss_euclidean(T.add(a, b), t)), [a, b]

    def linear():
        n_in, n_out = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        x = _leaf(rng.normal(size=n_in))
        W = _leaf(rng.normal(size=(n_out, n_in)))
        b = _leaf(rng.normal(size=n_out))
        t = rng.normal(size=n_out)
        return (lambda: tr.loss_euclidean(T.linear(x, W, b), t)), [x, W, b]

    def prelu():
        x = _leaf(_away_from_zero(rng, int(rng.integers(3, 8))))
        a = _leaf(np.array([rng.uniform(0.05, 0.5)]))
        t = rng.normal(size=x.shape)
        return (lambda: tr.loss_euclidean(T.prelu(x, a), t)), [x, a]

    def concat():
        _, h, w = shape3()
        a = _leaf(rng.normal(size=(int(rng.integers(1, 4)), h, w)))
        b = _leaf(rng.normal(size=(int(rng.integers(1, 4)), h, w)))
        t = rng.normal(size=(a.shape[0] + b.shape[0], h, w))
        return (lambda: tr.loss_euclidean(T.concat_channels(a, b), t)), [a, b]

    def split():
        c, h, w = shape3()
        x = _leaf(rng.normal(size=(c + 1, h, w)))
        at = int(rng.integers(1, c + 1))
        t1, t2 = rng.normal(size=(at, h, w)), rng.normal(size=(c + 1 - at, h, w))

        def f():
            a, b = T.split_channels(x, at)
            return T.add(tr.loss_euclidean(a, t1), tr.loss_euclidean(b, t2) * 0.5)

        return f, [x]

    def take_row():
        m = _leaf(rng.normal(size=(int(rng.integers(2, 5)), int(rng.integers(2, 5)))))
        i = int(rng.integers(0, m.shape[0]))
        t = rng.normal(size=m.shape[1])
        return (lambda: tr.loss_euclidean(T.take_row(m, i), t)), [m]

    def scale_channels():
        c, h, w = shape3()
        x = _leaf(rng.normal(size=(c, h, w)))
        s = _leaf(rng.normal(size=c))
        t = rng.normal(size=(c, h, w))
        return (lambda: tr.loss_euclidean(T.scale_channels(x, s), t)), [x, s]

    def cross_entropy():
        z = _leaf(rng.normal(size=int(rng.integers(2, 7))))
        k = int(rng.integers(0, z.shape[0]))
        return (lambda: tr.loss_cross_entropy(z, k)), [z]

    def weighted_bce():
        s = (1, int(rng.integers(2, 7)), int(rng.integers(2, 7)))
        c = _leaf(rng.uniform(0.05, 0.95, s))
        m = (rng.uniform(size=s) < rng.uniform(0.1, 0.9)).astype(np.float64)
        return (lambda: tr.loss_weighted_bce(c, m)), [c]

    def euclidean():
        s = shape3()
        p = _leaf(rng.normal(size=s))
        t = rng.normal(size=s)
        return (lambda: tr.loss_euclidean(p, t)), [p]

    def whole():
        cfg = tr.TrainConfig()
        s = (1, 3, 4)
        p1, p2 = _leaf(rng.normal(size=s)), _leaf(rng.normal(size=s))
        c = _leaf(rng.uniform(0.05, 0.95, s))
        z = _leaf(rng.normal(size=3))
        t = rng.uniform(size=s)
        m = (rng.uniform(size=s) < 0.5).astype(np.float64)
        m.flat[0], m.flat[1] = 0.0, 1.0

        def f():
            total, _ = tr.loss_whole(
                tr.loss_euclidean(p1, t), tr.loss_euclidean(p2, t), tr.loss_weighted_bce(c, m),
                tr.loss_cross_entropy(z, 1), cfg,
            )
            return total

        return f, [p1, p2, c, z]

    return {
        "conv2d": lambda: _conv_case(rng, 1, 3),
        "conv2d_dilated": lambda: _conv_case(rng, int(rng.integers(2, 4)), 3),
        "conv2d_1x1": lambda: _conv_case(rng, 1, 1),
        "maxpool2": lambda: _unary(rng, T.maxpool2, _distinct(rng, shape3())),
        "adaptive_max_pool": lambda: _unary(
            rng, lambda x: T.adaptive_max_pool(x, 2, 3), _distinct(rng, (2, int(rng.integers(3, 8)), int(rng.integers(4, 9))))
        ),
        "avg_pool_all": lambda: _unary(rng, T.avg_pool_all, rng.normal(size=shape3())),
        "relu": lambda: _unary(rng, T.relu, _away_from_zero(rng, shape3())),
        "prelu": prelu,
        "sigmoid": lambda: _unary(rng, T.sigmoid, 3.0 * rng.normal(size=shape3())),
        "mul_elementwise": mul,
        "add": add,
        "scale": lambda: _unary(rng, lambda x: T.scale(x, 1.7), rng.normal(size=shape3())),
        "tensor_sum": lambda: _unary(rng, lambda x: T.tensor_sum(x), rng.normal(size=shape3())),
        "linear": linear,
        "concat_channels": concat,
        "split_channels": split,
        "take_row": take_row,
        "scale_channels": scale_channels,
        "loss_cross_entropy": cross_entropy,
        "loss_weighted_bce": weighted_bce,
        "loss_euclidean": euclidean,
        "loss_whole": whole,
    }


def model_check(seed: int = 0) -> float:
    """Whole-network check on a tiny configuration with the predicted class frozen.

    Biases and weights are redrawn at unit-ish scale so no ReLU sits exactly
    on its kink (zero biases over a constant-zero patch would).
    """
    rng = np.random.default_rng(seed)
    arch = ArchConfig(base_channels=2, trunk_widths=[4, 6, 4], c1=4, K=3, dilation_set=[1, 2])
    params = init_params(arch, seed)
    for t in params.values():
        t.data[...] = rng.normal(0.0, 0.5, t.data.shape)
    params["cls.prelu.slope"].data[...] = 0.25
    image = rng.uniform(size=(1, 16, 16))
    density = rng.uniform(0, 0.1, (1, 4, 4))
    mask = (rng.uniform(size=(1, 4, 4)) < 0.5).astype(np.float64)
    cfg = tr.TrainConfig(arch=arch)
    sample = tr.Sample(image, np.zeros((0, 2)), density, mask, 1.0, 1, "gradcheck")
    with T.no_grad():
        _, _, out = tr.sample_losses(sample, params, cfg)
    predicted = out.predicted

    def f():
        return tr.sample_losses(sample, params, cfg, predicted=predicted)[0]

    return max(T.grad_check(f, p) for p in params.values())


def run_suite(seed: int = 0, instances: int = INSTANCES, include_model: bool = True) -> dict[str, float]:
    """Worst relative error per op over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    cases = _cases(rng)
    worst = {}
    for name, build in cases.items():
        worst[name] = max(_check(build) for _ in range(instances))
    if include_model:
        worst["model_end_to_end"] = model_check(seed)
    return worst


def format_report(worst: dict[str, float], threshold: float = THRESHOLD) -> list[str]:
    lines = []
    for name, err in worst.items():
        flag = "ok" if err < threshold else "FAIL"
        lines.append(f"{name:<22} max_rel_error={err:.3e} {flag}")
    return lines

