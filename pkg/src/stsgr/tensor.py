"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on the
output tensor. Calling :meth:`Tensor.backward` linearizes the recorded graph
into a :class:`Tape` (topological order) and replays it in reverse.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self) -> Tape:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            _raise_not_scalar(self.shape)
        tape = Tape.from_output(self)
        tape.replay(self)
        return tape

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def max(self, axis: int = -1) -> Tensor:
        return max_(self, axis)


def _raise_not_scalar(shape):
    raise ShapeError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


class Tape:
    """Topologically ordered record of the operations leading to an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.entries = [
            TapeEntry(n.op, tuple(p.node_id for p in n._parents), n.node_id) for n in nodes if n._parents
        ]

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, out: Tensor) -> None:
        grads: dict[int, np.ndarray] = {out.node_id: np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.node_id in grads:
                    grads[p.node_id] = grads[p.node_id] + pg
                else:
                    grads[p.node_id] = pg


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped (zero gradient there)."""
    clamped = x.data < floor
    safe = np.where(clamped, floor, x.data)
    out = np.log(safe)
    return _result(out, (x,), lambda g: (np.where(clamped, 0.0, g / safe),), "log")


_ELEMENTWISE = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "exp": exp}


def elementwise(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    try:
        return _ELEMENTWISE[kind](x)
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with integer ``indices`` (any shape)."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        gi = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gi)
        return (full,)

    return _result(out, (x,), backward, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ValueError("concat of an empty list")
    xs = [as_tensor(x) for x in xs]
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shape mismatch off axis {axis}: {[t.shape for t in xs]}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        sl = [slice(None)] * nd
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(out, xs, backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[ax]}")
    parts, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(lo, lo + n)
        parts.append(getitem(x, tuple(sl)))
        lo += n
    return parts


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / n)


def max_(x: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal index."""
    ax = axis % x.ndim
    arg = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _result(out, (x,), backward, "max")


def max_over(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise max over same-shaped tensors (first tensor wins ties)."""
    if not xs:
        raise ValueError("max_over of an empty list")
    if len(xs) == 1:
        return xs[0]
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ShapeError(f"max_over shape mismatch: {[x.shape for x in xs]}")
    stacked = concat([reshape(x, (1,) + shape) for x in xs], axis=0)
    return max_(stacked, axis=0)


def mean_rows(x: Tensor) -> Tensor:
    return mean(x, axis=0)


def max_rows(x: Tensor) -> Tensor:
    return max_(x, axis=0)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is False are exactly 0."""
    z = x.data
    if np.isnan(z).any():
        raise FloatingPointError("softmax received NaN input")
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax row with every entry masked")
    e = np.exp(z - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x, axis=1)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    return _result(xhat, (x,), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# segment (scatter) operations over a leading "edge" axis
# ---------------------------------------------------------------------------

def segment_sum(x: Tensor, segments: np.ndarray, n: int) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, segments, x.data)
    return _result(out, (x,), lambda g: (g[segments],), "segment_sum")


def segment_mean(x: Tensor, segments: np.ndarray, n: int) -> Tensor:
    counts = np.bincount(segments, minlength=n).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("segment_mean over an empty segment")
    return segment_sum(x, segments, n) * (1.0 / counts).reshape((n,) + (1,) * (x.ndim - 1))


def segment_max(x: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Per-segment coordinatewise max; ties send gradient to the lowest row."""
    segments = np.asarray(segments, dtype=np.int64)
    if np.bincount(segments, minlength=n).min(initial=1) == 0:
        raise ValueError("segment_max over an empty segment")
    out = np.full((n,) + x.shape[1:], -np.inf)
    np.maximum.at(out, segments, x.data)
    rows = np.arange(x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
    cand = np.where(x.data == out[segments], rows, x.shape[0])
    first = np.full(out.shape, x.shape[0], dtype=np.int64)
    np.minimum.at(first, segments, cand)

    def backward(g):
        full = np.zeros_like(x.data)
        flat_full = full.reshape(x.shape[0], -1)
        cols = np.broadcast_to(np.arange(flat_full.shape[1]), (n, flat_full.shape[1]))
        np.add.at(flat_full, (first.reshape(n, -1), cols), g.reshape(n, -1))
        return (full,)

    return _result(out, (x,), backward, "segment_max")


def segment_softmax(x: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Softmax over rows sharing a segment id, independently per trailing column."""
    segments = np.asarray(segments, dtype=np.int64)
    m = np.full((n,) + x.shape[1:], -np.inf)
    np.maximum.at(m, segments, x.data)
    e = np.exp(x.data - m[segments])
    s = np.zeros_like(m)
    np.add.at(s, segments, e)
    out = e / s[segments]

    def backward(g):
        gy = g * out
        tot = np.zeros_like(m)
        np.add.at(tot, segments, gy)
        return (gy - out * tot[segments],)

    return _result(out, (x,), backward, "segment_softmax")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(scores: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy of sigmoid(scores) against 0/1 targets."""
    s = scores.data
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)
    n = w.sum()
    per = np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))
    out = np.asarray((per * w).sum() / n)
    sig = 0.5 * (1.0 + np.tanh(0.5 * s))
    return _result(out, (scores,), lambda g: (g * w * (sig - y) / n,), "bce_with_logits")
