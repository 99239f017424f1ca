"""Dense float64 tensors with a reverse-mode gradient tape."""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from ..core import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` on every tracked tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior nodes release their buffers once propagated
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backward = backward
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


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (D_out, D_in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        if x.requires_grad:
            x._accum((g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            weight._accum(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(*lead, weight.shape[0]), parents, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accum(g * mask)

    return _result(x.data * mask, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accum(np.broadcast_to(g, x.shape).copy())

    return _result(np.asarray(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = max(x.size, 1)

    def bw(g):
        x._accum(np.full(x.shape, float(g) / n))

    return _result(np.asarray(x.data.sum() / n), (x,), bw)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full inner product of two same-shape tensors."""
    return sum_all(mul(a, b))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        x._accum(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            if x.requires_grad:
                x._accum(part)

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Select entries along axis 0 (indices may repeat)."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros(x.shape)
        if index.size == 0:
            x._accum(full)
            return
        order = np.argsort(index, kind="stable")
        sorted_idx = index[order]
        starts = np.flatnonzero(np.concatenate([[True], sorted_idx[1:] != sorted_idx[:-1]]))
        if len(starts) == len(index):
            full[index] = g
        else:
            # sorted segment sums: a fixed reduction order, much faster than ufunc.at
            full[sorted_idx[starts]] = np.add.reduceat(g[order], starts, axis=0)
        x._accum(full)

    return _result(x.data[index], (x,), bw)


class Segments:
    """Grouping of rows by integer key, reused by :func:`segment_mean`."""

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys)
        if keys.ndim == 1:
            keys = keys[:, None]
        _, self.inverse, self.counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        self.inverse = self.inverse.reshape(-1)
        self.order = np.argsort(self.inverse, kind="stable")
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])

    @property
    def num_segments(self) -> int:
        return len(self.counts)

    def sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values[self.order], self.starts, axis=0)


def segment_mean(x: Tensor, seg: Segments) -> Tensor:
    """Mean of the rows of ``x`` within each segment, shape (num_segments, D)."""
    counts = seg.counts[:, None].astype(np.float64)
    out = seg.sum(x.data) / counts

    def bw(g):
        x._accum((g / counts)[seg.inverse])

    return _result(out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, C), got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target index outside 0..{c - 1}")
    if n == 0:
        return _result(np.asarray(0.0), (logits,), lambda g: logits._accum(np.zeros(logits.shape)))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, targets]).mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        logits._accum(p * (float(g) / n))

    return _result(np.asarray(loss), (logits,), bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Masked mean BCE in the stable ``max(z,0) - z t + log1p(exp(-|z|))`` form.

    An empty mask gives exactly 0.
    """
    z = logits.data.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    m = np.ones_like(z) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if not (len(t) == len(z) == len(m)):
        raise ShapeError("logits, targets and mask must have equal length")
    count = m.sum()
    if count == 0:
        return _result(np.asarray(0.0), (logits,), lambda g: logits._accum(np.zeros(logits.shape)))
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = (per * m).sum() / count

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        logits._accum(((sig - t) * m * (float(g) / count)).reshape(logits.shape))

    return _result(np.asarray(loss), (logits,), bw)
