"""Small reverse-mode automatic differentiation engine over dense float64 arrays.

Every loss and network in the package is written against :class:`Tensor`.
Nodes record their parents and a closure mapping the output gradient to one
gradient per parent; :func:`backward` walks the recorded graph in reverse
topological order.  Nodes whose inputs carry no gradient are built without a
closure, so teacher-side computation never enters a graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Tensor", "tensor", "parameter", "backward",
    "add", "sub", "mul", "scalar_mul", "matmul", "transpose", "exp", "log",
    "relu", "clamp_min", "softmax_rows", "l2_normalize_rows", "gather_rows",
    "segment_mean", "sum", "mean", "weighted_sum", "detach",
]


class Tensor:
    """Value node: data, shape, optional gradient and the op that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "flags")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.flags: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)
    __rmul__ = __mul__
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scalar_mul(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data) -> Tensor:
    """Constant (non-differentiable) tensor."""
    return Tensor(np.array(data, dtype=np.float64, copy=True))


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradient."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite output")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out, op=op)
    return Tensor(out, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """True when b is a row vector broadcast over the rows of a 2-D a."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])):
        return True
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _row_broadcast("add", a, b)
    bshape = b.shape

    def bw(g):
        gb = g.sum(axis=0).reshape(bshape) if bcast else g
        return g, gb

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _row_broadcast("sub", a, b)
    bshape = b.shape

    def bw(g):
        gb = -(g.sum(axis=0).reshape(bshape) if bcast else g)
        return g, gb

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scalar_mul", a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D tensor, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make("log", out, (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); entries clamped at ``lo`` pass no gradient."""
    keep = a.data >= lo
    return _make("clamp_min", np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def softmax_rows(a: Tensor, temp: float = 1.0) -> Tensor:
    """Row-wise softmax of ``a / temp`` with max subtraction."""
    if temp <= 0:
        raise DimensionError(f"softmax_rows: temperature must be > 0, got {temp}")
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D tensor, got shape {a.shape}")
    z = a.data / temp
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner) / temp,)

    return _make("softmax_rows", out, (a,), bw)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every row to unit norm.

    Rows with norm below ``eps`` come out as exact zeros with zero gradient;
    their indices are recorded in ``out.flags["zero_rows"]``.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected 2-D tensor, got shape {a.shape}")
    norms = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True))
    degenerate = norms[:, 0] < eps
    safe = np.where(degenerate[:, None], 1.0, norms)
    out = np.where(degenerate[:, None], 0.0, a.data / safe)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        ga = (g - out * dot) / safe
        ga[degenerate] = 0.0
        return (ga,)

    t = _make("l2_normalize_rows", out, (a,), bw)
    t.flags["zero_rows"] = np.flatnonzero(degenerate)
    return t


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows: expected 2-D tensor, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {a.shape[0]} rows")
    nrows = a.shape[0]

    def bw(g):
        ga = np.zeros((nrows, g.shape[1]))
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("gather_rows", a.data[idx], (a,), bw)


def segment_mean(a: Tensor, seg_ids, num_segments: int) -> Tensor:
    """Average the rows of ``a`` sharing a segment id; empty segments give zero rows."""
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    if a.data.ndim != 2 or seg_ids.shape != (a.shape[0],):
        raise DimensionError(f"segment_mean: {seg_ids.shape[0]} ids for tensor of shape {a.shape}")
    counts = np.bincount(seg_ids, minlength=num_segments).astype(np.float64)
    if counts.shape[0] > num_segments:
        raise DimensionError("segment_mean: segment id exceeds num_segments")
    out = np.zeros((num_segments, a.shape[1]))
    np.add.at(out, seg_ids, a.data)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out *= inv[:, None]
    scale = inv[seg_ids][:, None]
    return _make("segment_mean", out, (a,), lambda g: (g[seg_ids] * scale,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    ad = a.data
    if axis is None:
        shape = ad.shape
        return _make("sum", np.asarray(ad.sum()), (a,), lambda g: (np.full(shape, float(g)),))
    out = ad.sum(axis=axis, keepdims=True)
    return _make("sum", out, (a,), lambda g: (np.broadcast_to(g, ad.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    if n == 0:
        raise DimensionError("mean: empty tensor")
    return _make("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def weighted_sum(a: Tensor, w) -> Tensor:
    """Scalar sum of ``w * a`` with a constant weight array."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")
    return _make("weighted_sum", np.asarray((w * a.data).sum()), (a,), lambda g: (float(g) * w,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy(), op="detach")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
