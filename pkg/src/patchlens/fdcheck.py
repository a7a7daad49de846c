"""Central finite differences, used as an oracle for the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import numcore as nc

FD_STEP = 1e-5


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """``J[m, n] = d f(x)[m] / d x[n]`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = np.asarray(f(x), dtype=np.float64).reshape(-1)
        flat[i] = orig - step
        lo = np.asarray(f(x), dtype=np.float64).reshape(-1)
        flat[i] = orig
        cols.append((hi - lo) / (2 * step))
    return np.stack(cols, axis=1)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error ``max|a-b| / max(max|a|, max|b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def graph_fd_error(
    build: Callable[..., nc.Matrix],
    shapes: Sequence[tuple[int, int]],
    seed: int = 0,
    lo: float = -2.0,
    hi: float = 2.0,
    positive: Sequence[int] = (),
) -> float:
    """Worst relative error between tape and central-difference gradients of ``sum(build(*inputs) * W)``.

    Inputs are uniform on ``[lo, hi]``, or on ``[0.5, 2]`` for indices in
    ``positive``; ``W`` is a fixed random weighting so every output entry counts.
    """
    rng = np.random.default_rng(seed)
    inputs = [rng.uniform(*((0.5, 2.0) if i in positive else (lo, hi)), size=shape) for i, shape in enumerate(shapes)]
    weights = rng.normal(size=build(*[nc.const(x) for x in inputs]).shape)

    params = [nc.param(x.copy()) for x in inputs]
    grads = nc.backward(nc.sum_all(nc.mul(build(*params), nc.const(weights))))
    worst = 0.0
    for k, p in enumerate(params):
        def f(x, k=k):
            arrs = list(inputs)
            arrs[k] = x
            return float((build(*[nc.const(a) for a in arrs]).data * weights).sum())

        worst = max(worst, rel_error(grads[p], numeric_grad(f, inputs[k].copy())))
    return worst


# name -> (builder, input shapes, indices of strictly positive inputs)
OP_CASES: dict[str, tuple[Callable[..., nc.Matrix], list[tuple[int, int]], tuple[int, ...]]] = {
    "matmul": (lambda a, b: nc.matmul(a, b), [(3, 4), (4, 2)], ()),
    "add": (lambda a, b: nc.add(a, b), [(3, 4), (3, 4)], ()),
    "add_row": (lambda a, b: nc.add(a, b), [(3, 4), (1, 4)], ()),
    "add_scalar": (lambda a: nc.add_scalar(a, 0.3), [(2, 3)], ()),
    "sub": (lambda a, b: nc.sub(a, b), [(2, 3), (2, 3)], ()),
    "scale": (lambda a: nc.scale(a, -1.7), [(3, 3)], ()),
    "mul": (lambda a, b: nc.mul(a, b), [(3, 2), (3, 2)], ()),
    "transpose": (lambda a: nc.transpose(a), [(2, 5)], ()),
    "softmax_rows": (lambda a: nc.softmax_rows(a), [(3, 5)], ()),
    "masked_softmax_rows": (lambda a: nc.softmax_rows(a, np.tril(np.ones((4, 4), dtype=bool))), [(4, 4)], ()),
    "log_softmax_rows": (lambda a: nc.log_softmax_rows(a), [(3, 5)], ()),
    "layernorm": (lambda x, g, b: nc.layernorm(x, g, b), [(4, 6), (1, 6), (1, 6)], ()),
    "gelu": (lambda a: nc.gelu(a), [(3, 4)], ()),
    "embedding": (lambda t: nc.embedding(t, [2, 0, 2, 1]), [(4, 3)], ()),
    "take_rows": (lambda a: nc.take_rows(a, [3, 1]), [(4, 3)], ()),
    "take_col": (lambda a: nc.take_col(a, 2), [(3, 4)], ()),
    "concat_rows": (lambda a, b: nc.concat_rows([a, b]), [(2, 3), (1, 3)], ()),
    "concat_cols": (lambda a, b: nc.concat_cols([a, b]), [(2, 3), (2, 1)], ()),
    "slice_cols": (lambda a: nc.slice_cols(a, 1, 3), [(2, 4)], ()),
    "clip": (lambda a: nc.clip(a, -1.0, 1.0), [(3, 4)], ()),
    "log": (lambda a: nc.log(a), [(2, 3)], (0,)),
    "sum_all": (lambda a: nc.sum_all(a), [(3, 3)], ()),
    "mean_all": (lambda a: nc.mean_all(a), [(3, 3)], ()),
    "cross_entropy": (lambda a: nc.cross_entropy(a, [1, 0, 3]), [(3, 4)], ()),
}
