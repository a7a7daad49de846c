"""Dense float64 matrices with a dynamic reverse-mode tape.

Every operation returns a new :class:`Matrix` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. The tape is
rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Matrix",
    "ShapeError",
    "NumericError",
    "param",
    "const",
    "matmul",
    "add",
    "sub",
    "add_scalar",
    "scale",
    "mul",
    "transpose",
    "softmax_rows",
    "log_softmax_rows",
    "layernorm",
    "gelu",
    "embedding",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "take_rows",
    "take_col",
    "clip",
    "log",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "backward",
]

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Matrix:
    """A rank-2 float64 array registered on the tape."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "op", "name", "__weakref__")

    def __init__(
        self,
        data,
        parents: tuple["Matrix", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
        requires_grad: bool = False,
        name: str | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix must be rank 2, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value produced by op '{op}'")
        self.data = arr
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Matrix":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other) -> "Matrix":
        if isinstance(other, Matrix):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Matrix":
        if isinstance(other, Matrix):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other) -> "Matrix":
        return add_scalar(scale(self, -1.0), float(other))

    def __neg__(self) -> "Matrix":
        return scale(self, -1.0)

    def __mul__(self, other) -> "Matrix":
        if isinstance(other, Matrix):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Matrix{label}(op={self.op}, shape={self.shape})"


def param(data, name: str | None = None) -> Matrix:
    """A leaf that receives a gradient from :func:`backward`."""
    return Matrix(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def const(data) -> Matrix:
    return Matrix(data)


def _node(data, parents, backward_fn, op) -> Matrix:
    return Matrix(data, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _shape_error(op: str, a: Matrix, b: Matrix) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise _shape_error("matmul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), back, "matmul")


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; ``b`` may be a single row broadcast over ``a``."""
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.rows == 1 and b.cols == a.cols:
        return _node(
            a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row"
        )
    raise _shape_error("add", a, b)


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise _shape_error("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def add_scalar(a: Matrix, c: float) -> Matrix:
    return _node(a.data + c, (a,), lambda g: (g,), "add_scalar")


def scale(a: Matrix, c: float) -> Matrix:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def transpose(a: Matrix) -> Matrix:
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def softmax_rows(m: Matrix, mask: np.ndarray | None = None) -> Matrix:
    """Row softmax with max subtraction.

    ``mask`` is a boolean array of allowed entries; disallowed entries get
    probability exactly 0 and receive exactly zero gradient. Every row must
    allow at least one entry.
    """
    x = m.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax_rows: mask shape {mask.shape} vs input {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row has no allowed entries")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (m,), back, "softmax_rows")


def log_softmax_rows(m: Matrix) -> Matrix:
    x = m.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _node(out, (m,), back, "log_softmax_rows")


def layernorm(x: Matrix, gain: Matrix, bias: Matrix, eps: float = LN_EPS) -> Matrix:
    """Row-wise layer normalisation with a (1, d) gain and bias."""
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} do not match width {x.cols}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node(xhat * gd + bias.data, (x, gain, bias), back, "layernorm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Matrix) -> Matrix:
    """Tanh-approximated GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _node(out, (x,), back, "gelu")


def embedding(table: Matrix, ids: Sequence[int] | np.ndarray) -> Matrix:
    """Rows of ``table`` selected by integer ``ids``."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise IndexError(f"embedding: id out of range for table with {table.rows} rows")
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(table.data[idx], (table,), back, "embedding")


take_rows = embedding


def concat_rows(parts: Sequence[Matrix]) -> Matrix:
    parts = list(parts)
    width = parts[0].cols
    for p in parts[1:]:
        if p.cols != width:
            raise _shape_error("concat_rows", parts[0], p)
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(np.vstack([p.data for p in parts]), parts, back, "concat_rows")


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    parts = list(parts)
    height = parts[0].rows
    for p in parts[1:]:
        if p.rows != height:
            raise _shape_error("concat_cols", parts[0], p)
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(np.hstack([p.data for p in parts]), parts, back, "concat_cols")


def slice_cols(a: Matrix, start: int, stop: int) -> Matrix:
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}) outside {a.shape}")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _node(a.data[:, start:stop].copy(), (a,), back, "slice_cols")


def take_col(a: Matrix, j: int) -> Matrix:
    return slice_cols(a, j, j + 1)


def clip(a: Matrix, lo: float, hi: float) -> Matrix:
    """Clamp to [lo, hi]; gradient passes only where the input is strictly inside."""
    xd = a.data
    inside = (xd > lo) & (xd < hi)
    return _node(np.clip(xd, lo, hi), (a,), lambda g: (g * inside,), "clip")


def log(a: Matrix) -> Matrix:
    xd = a.data
    if np.any(xd <= 0):
        raise NumericError("log: non-positive input")
    return _node(np.log(xd), (a,), lambda g: (g / xd,), "log")


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return _node(a.data.sum(), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum_all")


def mean_all(a: Matrix) -> Matrix:
    shape = a.shape
    n = a.data.size
    return _node(a.data.mean(), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean_all")


def cross_entropy(logits: Matrix, targets: Sequence[int]) -> Matrix:
    """Mean over rows of ``-log softmax(logits)[row, target]``."""
    tg = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tg.size != logits.rows:
        raise ShapeError(f"cross_entropy: {tg.size} targets for {logits.rows} rows")
    if tg.min() < 0 or tg.max() >= logits.cols:
        raise IndexError("cross_entropy: target id out of range")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(tg.size)
    loss = np.mean(lse - shifted[rows, tg])
    n = tg.size

    def back(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, tg] -= 1.0
        return (p * (g[0, 0] / n),)

    return _node(loss, (logits,), back, "cross_entropy")


def _topological(root: Matrix) -> list[Matrix]:
    order: list[Matrix] = []
    seen: set[int] = set()
    stack: list[tuple[Matrix, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Matrix, retain: Iterable[Matrix] = ()) -> dict[Matrix, np.ndarray]:
    """Gradients of the scalar ``loss``.

    Returns a mapping (keyed by node identity) holding every reachable
    parameter (``requires_grad``) and every node listed in ``retain``. Nodes
    in ``retain`` that the loss does not depend on map to zeros.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be a 1x1 scalar, got {loss.shape}")
    keep = {id(m): m for m in retain}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    order = _topological(loss)
    result: dict[Matrix, np.ndarray] = {}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.requires_grad or id(node) in keep:
            result[node] = g
        if node.backward_fn is None:
            continue
        if id(node) not in keep:
            del grads[id(node)]
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for m in keep.values():
        if m not in result:
            result[m] = np.zeros(m.shape)
    return result
