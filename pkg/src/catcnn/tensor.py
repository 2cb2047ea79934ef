"""Minimal reverse-mode tensor engine.

Only the operations the counting network needs are provided. Every tensor
carries a float64 numpy array in channels-first layout; operations record a
closure that pushes the upstream gradient back into their inputs.  The order
in which tensors are created doubles as a topological order, so ``backward``
just replays the recorded closures from newest to oldest.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.enabled = False

    def __exit__(self, *exc):
        _state.enabled = self._prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # small arithmetic helpers used by the loss combination
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, k: float) -> Tensor:
        return scale(self, k)

    __rmul__ = __mul__


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out._id = next(_ids)
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Repeated calls accumulate; callers zero gradients between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
    # interior grads are scratch space for this pass only
    interior = [t for t in order if t._backward is not None]
    for t in interior:
        t.grad = np.zeros_like(t.data)
    loss.grad += 1.0
    for t in interior:
        t._backward(t.grad)
    for t in interior:
        t.grad = None


def _check_rank(x: Tensor, rank: int, op: str) -> None:
    if x.data.ndim != rank:
        raise ShapeError(f"{op}: expected rank {rank}, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """'Same'-padded cross-correlation with a square odd kernel and dilated taps."""
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation!r}")
    _check_rank(x, 3, "conv2d")
    _check_rank(weight, 4, "conv2d")
    c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {wc_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    k = kh
    pad = dilation * (k - 1) // 2
    xp = _pad(x.data, pad)
    taps = [(ky * dilation, kx * dilation) for ky in range(k) for kx in range(k)]
    # cols[c, t, :] is tap t of channel c; matches weight.reshape(c_out, c_in*k*k)
    cols = np.empty((c_in, k * k, h * w))
    for t, (oy, ox) in enumerate(taps):
        cols[:, t, :] = xp[:, oy:oy + h, ox:ox + w].reshape(c_in, h * w)
    cols = cols.reshape(c_in * k * k, h * w)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(c_out, h, w)

    def _backward(g: np.ndarray) -> None:
        g2 = g.reshape(c_out, h * w)
        if weight.requires_grad:
            _accum(weight, (g2 @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c_in, k * k, h, w)
            dxp = np.zeros_like(xp)
            for t, (oy, ox) in enumerate(taps):
                dxp[:, oy:oy + h, ox:ox + w] += dcols[:, t]
            _accum(x, dxp[:, pad:pad + h, pad:pad + w] if pad else dxp)

    return _result(out, (x, weight, bias), _backward)


# --------------------------------------------------------------------------
# pooling


def _window_bounds(n: int, m: int) -> list[tuple[int, int]]:
    return [((i * n) // m, ((i + 1) * n) // m) for i in range(m)]


def _max_pool_windows(x: Tensor, rows, cols) -> Tensor:
    c = x.shape[0]
    out = np.empty((c, len(rows), len(cols)))
    # flat argmax inside x for each output cell; argmax returns first hit in row-major order
    arg = np.empty((c, len(rows), len(cols)), dtype=np.int64)
    h, w = x.shape[1:]
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            win = x.data[:, r0:r1, c0:c1].reshape(c, -1)
            a = win.argmax(axis=1)
            out[:, i, j] = win[np.arange(c), a]
            ww = c1 - c0
            arg[:, i, j] = (r0 + a // ww) * w + (c0 + a % ww)

    def _backward(g: np.ndarray) -> None:
        dx = np.zeros((c, h * w))
        flat = arg.reshape(c, -1)
        for ch in range(c):
            np.add.at(dx[ch], flat[ch], g[ch].ravel())
        _accum(x, dx.reshape(c, h, w))

    return _result(out, (x,), _backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; odd trailing rows/columns form 1-wide windows."""
    _check_rank(x, 3, "maxpool2")
    c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    if h % 2 == 0 and w % 2 == 0:
        return _maxpool2_even(x)
    rows = [(2 * i, min(2 * i + 2, h)) for i in range(ho)]
    cols = [(2 * j, min(2 * j + 2, w)) for j in range(wo)]
    return _max_pool_windows(x, rows, cols)


def _maxpool2_even(x: Tensor) -> Tensor:
    c, h, w = x.shape
    ho, wo = h // 2, w // 2
    # window element order (0,0),(0,1),(1,0),(1,1) is row-major inside the window
    blocks = x.data.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    a = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, a[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray) -> None:
        db = np.zeros((c, ho, wo, 4))
        np.put_along_axis(db, a[..., None], g[..., None], axis=-1)
        _accum(x, db.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w))

    return _result(out, (x,), _backward)


def adaptive_max_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max over windows [floor(i*H/out_h), floor((i+1)*H/out_h)) (same for columns)."""
    _check_rank(x, 3, "adaptive_max_pool")
    _, h, w = x.shape
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise ValueError(f"adaptive_max_pool: output {out_h}x{out_w} invalid for input {h}x{w}")
    return _max_pool_windows(x, _window_bounds(h, out_h), _window_bounds(w, out_w))


def avg_pool_all(x: Tensor) -> Tensor:
    _check_rank(x, 3, "avg_pool_all")
    c, h, w = x.shape
    n = h * w
    out = x.data.reshape(c, n).mean(axis=1)

    def _backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to((g / n)[:, None, None], x.shape).copy())

    return _result(out, (x,), _backward)


# --------------------------------------------------------------------------
# pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def _backward(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _result(out, (x,), _backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x if x > 0 else slope*x, with a single shared learnable slope."""
    if slope.data.size != 1:
        raise ShapeError(f"prelu: slope must hold one value, got shape {slope.shape}")
    a = float(slope.data.reshape(()))
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def _backward(g: np.ndarray) -> None:
        _accum(x, np.where(pos, g, a * g))
        if slope.requires_grad:
            _accum(slope, np.reshape(np.sum(np.where(pos, 0.0, x.data) * g), slope.shape))

    return _result(out, (x, slope), _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def _backward(g: np.ndarray) -> None:
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), _backward)


def _broadcastable(a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape:
        return True
    # the one documented broadcast: a 1-channel [1,H,W] map against [C,H,W]
    return (
        a.data.ndim == 3
        and b.data.ndim == 3
        and a.shape[1:] == b.shape[1:]
        and (a.shape[0] == 1 or b.shape[0] == 1)
    )


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; a [1,H,W] operand is broadcast across channels."""
    if not _broadcastable(a, b):
        raise ShapeError(f"mul_elementwise: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g * b.data
            _accum(a, ga.sum(axis=0, keepdims=True) if ga.shape != a.shape else ga)
        if b.requires_grad:
            gb = g * a.data
            _accum(b, gb.sum(axis=0, keepdims=True) if gb.shape != b.shape else gb)

    return _result(out, (a, b), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def _backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), _backward)


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)

    def _backward(g: np.ndarray) -> None:
        _accum(x, g * k)

    return _result(x.data * k, (x,), _backward)


def tensor_sum(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray) -> None:
        _accum(x, np.full(x.shape, float(g)))

    return _result(np.array(x.data.sum()), (x,), _backward)


# --------------------------------------------------------------------------
# dense / channel plumbing


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _check_rank(x, 1, "linear")
    _check_rank(weight, 2, "linear")
    k, c = weight.shape
    if x.shape[0] != c or bias.shape != (k,):
        raise ShapeError(
            f"linear: weight {weight.shape}, input {x.shape}, bias {bias.shape} are inconsistent"
        )
    out = weight.data @ x.data + bias.data

    def _backward(g: np.ndarray) -> None:
        _accum(weight, np.outer(g, x.data))
        _accum(bias, g)
        _accum(x, weight.data.T @ g)

    return _result(out, (x, weight, bias), _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank(a, 3, "concat_channels")
    _check_rank(b, 3, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial extents {a.shape[1:]} and {b.shape[1:]} differ")
    ca = a.shape[0]

    def _backward(g: np.ndarray) -> None:
        _accum(a, g[:ca])
        _accum(b, g[ca:])

    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), _backward)


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    _check_rank(x, 3, "split_channels")
    c = x.shape[0]
    if not 0 < at < c:
        raise ValueError(f"split_channels: split point {at} outside (0, {c})")

    def _lo(g):
        d = np.zeros_like(x.data)
        d[:at] = g
        _accum(x, d)

    def _hi(g):
        d = np.zeros_like(x.data)
        d[at:] = g
        _accum(x, d)

    return _result(x.data[:at].copy(), (x,), _lo), _result(x.data[at:].copy(), (x,), _hi)


def take_row(m: Tensor, index: int) -> Tensor:
    """Row ``index`` of a matrix; the index itself is not differentiable."""
    _check_rank(m, 2, "take_row")
    if not 0 <= index < m.shape[0]:
        raise ValueError(f"take_row: index {index} outside [0, {m.shape[0]})")

    def _backward(g: np.ndarray) -> None:
        d = np.zeros_like(m.data)
        d[index] = g
        _accum(m, d)

    return _result(m.data[index].copy(), (m,), _backward)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """out[c] = s[c] * x[c] for x of shape [C,H,W] and s of shape [C]."""
    _check_rank(x, 3, "scale_channels")
    if s.shape != (x.shape[0],):
        raise ShapeError(f"scale_channels: scale shape {s.shape} does not match {x.shape[0]} channels")
    out = x.data * s.data[:, None, None]

    def _backward(g: np.ndarray) -> None:
        _accum(x, g * s.data[:, None, None])
        if s.requires_grad:
            _accum(s, np.einsum("chw,chw->c", g, x.data))

    return _result(out, (x, s), _backward)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5) -> float:
    """Largest relative error between the analytic gradient and central differences.

    ``f`` must rebuild its graph on every call and be deterministic.
    Relative error per element is |a - n| / max(1e-8, |a| + |n|).
    """
    if not leaf.requires_grad:
        raise ValueError("grad_check: leaf does not require grad")
    leaf.zero_grad()
    loss = f()
    backward(loss)
    analytic = leaf.grad.copy()
    leaf.zero_grad()

    numeric = np.empty_like(leaf.data)
    flat = leaf.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
