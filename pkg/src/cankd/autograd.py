"""A small dense-tensor library with reverse-mode automatic differentiation.

Every value is a float64 numpy array in C (row-major) order. Each differentiable
operation builds a new :class:`Tensor` that remembers its inputs and a closure
mapping the output gradient to input gradients; :func:`backward` walks that
record in reverse topological order.

Broadcasting is deliberately not supported beyond ``scalar * tensor``: binary
operations require identical shapes and raise :class:`ShapeMismatch` otherwise.
Leading batch extents are allowed where an operation says so (``matmul``,
``conv1x1``, ``maxpool2d``, ``softmax_rows``), but they must match exactly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidScale, NotScalar, ShapeMismatch

POOL_SCALES = (2, 4, 8)

_node_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operations (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.node_id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a Python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def record_op(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# record traversal


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input before its consumer."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Leaf gradients are summed into any existing ``.grad``, so calling this twice
    on the same record doubles them. Interior nodes get their gradient for this
    pass only.
    """
    if root.size != 1:
        raise NotScalar(f"backward() needs a one-element root, got shape {root.shape}")
    order = topo_order(root)
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(a.data * c, (a,), "scale", lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record_op(y, (a,), "exp", lambda g: (g * y,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and layout


def reduce_sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    shape = a.shape
    y = np.sum(a.data, axis=axis)
    if axis is None:
        return record_op(np.asarray(y), (a,), "reduce_sum", lambda g: (np.broadcast_to(g, shape).copy(),))
    axes = (axis,) if isinstance(axis, int) else axis
    axes = tuple(ax % len(shape) for ax in axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return record_op(y, (a,), "reduce_sum", bw)


def reduce_mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    y = a.data.reshape(tuple(shape))
    return record_op(y, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose2d(a: Tensor) -> Tensor:
    """Swap the last two axes (leading axes are kept as batch)."""
    if a.ndim < 2:
        raise ShapeMismatch("transpose2d needs rank >= 2")
    y = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return record_op(y, (a,), "transpose2d", lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., M, K] @ [..., K, P]`` with identical leading extents."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeMismatch(f"matmul: ranks {a.ndim} and {b.ndim}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record_op(ad @ bd, (a, b), "matmul", bw)


def conv1x1(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel linear map: ``x [..., C_in, H, W]``, ``w [C_out, C_in]``."""
    if w.ndim != 2 or x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeMismatch(f"conv1x1: weight {w.shape} does not fit input {x.shape}")
    lead, (c_in, h, wd) = x.shape[:-3], x.shape[-3:]
    c_out = w.shape[0]
    xm = x.data.reshape(-1, c_in, h * wd)
    wd_ = w.data
    y = (wd_ @ xm).reshape(lead + (c_out, h, wd))

    def bw(g):
        gm = g.reshape(-1, c_out, h * wd)
        gx = (wd_.T @ gm).reshape(x.shape)
        gw = (gm @ np.swapaxes(xm, 1, 2)).sum(axis=0)
        return gx, gw

    return record_op(y, (x, w), "conv1x1", bw)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 'same' convolution with an odd square kernel.

    ``x [..., C_in, H, W]``, ``w [C_out, C_in, k, k]``; zero padding of k // 2.
    Computed as a sum of shifted 1x1 applications (im2col).
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeMismatch(f"conv2d: weight must be [C_out, C_in, k, k] with odd k, got {w.shape}")
    if x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: weight {w.shape} does not fit input {x.shape}")
    lead, (c_in, h, wd) = x.shape[:-3], x.shape[-3:]
    c_out, k = w.shape[0], w.shape[2]
    p = k // 2
    xb = x.data.reshape(-1, c_in, h, wd)
    nb = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((nb, c_in, k, k, h, wd))
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + wd]
    cols = cols.reshape(nb, c_in * k * k, h * wd)
    wm = w.data.reshape(c_out, c_in * k * k)
    y = (wm @ cols).reshape(lead + (c_out, h, wd))

    def bw(g):
        gm = g.reshape(nb, c_out, h * wd)
        gw = (gm @ np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)
        gcols = (wm.T @ gm).reshape(nb, c_in, k, k, h, wd)
        gxp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gxp[:, :, dy:dy + h, dx:dx + wd] += gcols[:, :, dy, dx]
        gx = gxp[:, :, p:p + h, p:p + wd].reshape(x.shape)
        return gx, gw

    return record_op(y, (x, w), "conv2d", bw)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b[c]`` to every pixel of channel ``c`` of ``x [..., C, H, W]``."""
    if b.ndim != 1 or x.ndim < 3 or x.shape[-3] != b.shape[0]:
        raise ShapeMismatch(f"add_channel_bias: bias {b.shape} does not fit input {x.shape}")
    bd = b.data[:, None, None]
    red = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    return record_op(x.data + bd, (x, b), "add_channel_bias", lambda g: (g, g.sum(axis=red)))


# ---------------------------------------------------------------------------
# spatial


def pooled_extent(n: int, s: int) -> int:
    return -(-n // s)


def maxpool2d(x: Tensor, s: int) -> Tensor:
    """Non-overlapping s x s max pooling over the last two axes.

    Ragged right/bottom windows are kept (ceil division). Ties resolve to the
    first position in row-major window order, and the backward pass routes the
    whole window gradient there.
    """
    if s not in POOL_SCALES:
        raise InvalidScale(f"pool scale must be one of {POOL_SCALES}, got {s}")
    if x.ndim < 2:
        raise ShapeMismatch("maxpool2d needs rank >= 2")
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    ho, wo = pooled_extent(h, s), pooled_extent(w, s)
    padded = np.full(lead + (ho * s, wo * s), -np.inf)
    padded[..., :h, :w] = x.data
    win = padded.reshape(lead + (ho, s, wo, s))
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    win = win.transpose(perm).reshape(lead + (ho, wo, s * s))
    idx = np.argmax(win, axis=-1)[..., None]
    y = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(lead + (ho, wo, s * s))
        np.put_along_axis(gwin, idx, g[..., None], axis=-1)
        inv = gwin.reshape(lead + (ho, wo, s, s)).transpose(perm)
        return (inv.reshape(lead + (ho * s, wo * s))[..., :h, :w].copy(),)

    return record_op(y, (x,), "maxpool2d", bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every pixel of the last two axes ``factor`` times in each direction."""
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    y = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def bw(g):
        return (g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return record_op(y, (x,), "upsample_nearest", bw)


# ---------------------------------------------------------------------------
# normalisers


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op(y, (x,), "softmax_rows", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return record_op(y, (x,), "log_softmax", bw)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def __getitem__(self, name: str) -> ParamCheck:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_grad(f: Callable[[], Tensor], p: Tensor, step: float) -> np.ndarray:
    flat = p.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f().item()
        flat[i] = orig - step
        lo = f().item()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(p.shape)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    step: float = 1e-5,
    tol: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` closes over ``params`` and is re-evaluated with single elements nudged
    by ``+-step``. Pass ``analytic`` to check externally supplied gradients
    instead of running :func:`backward`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = dict(params) if isinstance(params, Mapping) else {f"p{i}": p for i, p in enumerate(params)}
    if analytic is None:
        for p in named.values():
            p.zero_grad()
        backward(f())
        analytic = {
            k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()
        }
    report = GradCheckReport()
    for name, p in named.items():
        num = numeric_grad(f, p, step)
        err = float(relative_error(analytic[name], num).max(initial=0.0))
        report.params.append(ParamCheck(name, err, err < tol))
    return report
