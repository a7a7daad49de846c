import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from patchlens import numcore as nc
from patchlens.fdcheck import OP_CASES, graph_fd_error, numeric_grad, rel_error

FD_TOL = 1e-5


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    out = nc.matmul(nc.const(np.eye(2)), nc.const([[3, 4], [5, 6]]))
    assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot_product():
    assert nc.matmul(nc.const([[1, 2]]), nc.const([[3], [4]])).item() == 11


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(nc.const(np.ones((2, 3))), nc.const(np.ones((2, 3))))


def test_matmul_grad_of_sum_matches_fd():
    rng = np.random.default_rng(7)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = nc.param(a0)
    grads = nc.backward(nc.sum_all(nc.matmul(a, nc.const(b0))))
    fd = numeric_grad(lambda x: float((x @ b0).sum()), a0.copy())
    assert rel_error(grads[a], fd) < 1e-6


# --- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    assert_allclose(nc.softmax_rows(nc.const([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_closed_form():
    p = nc.softmax_rows(nc.const([[0.0, math.log(2), math.log(3)]])).data
    assert_allclose(p, [[1 / 6, 1 / 3, 1 / 2]], rtol=1e-14)


def test_softmax_large_logit_no_overflow():
    p = nc.softmax_rows(nc.const([[1000.0, 0.0]])).data
    assert p[0, 0] == 1.0
    assert_allclose(p[0, 1], math.exp(-1000), rtol=1e-10, atol=0)


def test_softmax_mask_gives_exact_zero_and_zero_grad():
    x = nc.param(np.array([[0.3, -1.0, 2.0]]))
    p = nc.softmax_rows(x, mask=np.array([[True, False, True]]))
    assert p.data[0, 1] == 0.0
    g = nc.backward(nc.sum_all(nc.mul(p, nc.const([[1.0, 5.0, -2.0]]))))[x]
    assert g[0, 1] == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_are_distributions(m):
    p = nc.softmax_rows(nc.const(m)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all((p >= 0) & (p <= 1))
    # strictly inside (0, 1) while the logit spread stays within float64 resolution of 1
    if p.shape[1] > 1 and np.ptp(m, axis=1).max() < 30:
        assert np.all(p > 0) and np.all(p < 1)


# --- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = nc.param(np.arange(6.0).reshape(2, 3))
    assert_array_equal(nc.backward(nc.sum_all(w))[w], np.ones((2, 3)))


def test_backward_quadratic():
    w0 = np.random.default_rng(1).normal(size=(3, 3))
    w = nc.param(w0)
    loss = nc.scale(nc.sum_all(nc.mul(w, w)), 0.5)
    assert_allclose(nc.backward(loss)[w], w0, rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    with pytest.raises(nc.ShapeError):
        nc.backward(nc.param(np.ones((2, 2))))


def test_backward_retains_intermediates():
    x = nc.param(np.array([[1.0, 2.0]]))
    mid = nc.scale(x, 3.0)
    unused = nc.scale(x, 4.0)
    grads = nc.backward(nc.sum_all(mid), retain=[mid, unused])
    assert_array_equal(grads[mid], [[1.0, 1.0]])
    assert_array_equal(grads[unused], [[0.0, 0.0]])
    assert_array_equal(grads[x], [[3.0, 3.0]])


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(3)
    w = nc.param(rng.normal(size=(4, 4)))
    b = nc.param(rng.normal(size=(1, 4)))
    h = nc.gelu(nc.add(w @ w, b))
    loss = nc.mean_all(nc.softmax_rows(nc.layernorm(h, nc.param(np.ones((1, 4))), b)))
    g1 = nc.backward(loss)
    g2 = nc.backward(loss)
    for k in (w, b):
        assert g1[k].tobytes() == g2[k].tobytes()


def _random_graph(rng):
    """A composite graph mixing most ops; returns (build, input shapes, positive-only inputs)."""
    n, d = int(rng.integers(2, 5)), int(rng.integers(2, 5))

    def build(x, w, g, b):
        h = nc.layernorm(x @ w, g, b)
        a = nc.softmax_rows(nc.scale(h @ h.T, 0.5))
        y = nc.gelu(a @ h)
        z = nc.concat_rows([y, nc.take_rows(x @ w, [0])])
        return nc.concat_cols([z, nc.slice_cols(z, 0, 1)])

    return build, [(n, d), (d, d), (1, d), (1, d)]


@pytest.mark.parametrize("seed", range(20))
def test_random_composite_graphs_match_fd(seed):
    build, shapes = _random_graph(np.random.default_rng(seed))
    assert graph_fd_error(build, shapes, seed=seed) < FD_TOL


# --- per-op finite differences (20 random instances each) -------------------

@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_match_fd(op):
    build, shapes, positive = OP_CASES[op]
    worst = max(graph_fd_error(build, shapes, seed=s, positive=positive) for s in range(20))
    assert worst < FD_TOL, f"{op}: {worst:.2e}"


def test_clip_passes_gradient_only_inside():
    x = nc.param(np.array([[0.5, -1.0, 3.0]]))
    g = nc.backward(nc.sum_all(nc.clip(x, 0.0, 1.0)))[x]
    assert_array_equal(g, [[1.0, 0.0, 0.0]])


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_results_raise():
    with pytest.raises(nc.NumericError):
        nc.scale(nc.const([[1e308]]), 10.0)


def test_cross_entropy_uniform():
    loss = nc.cross_entropy(nc.const(np.zeros((2, 24))), [3, 7])
    assert loss.item() == pytest.approx(math.log(24), abs=1e-12)


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nc.embedding(nc.const(np.ones((3, 2))), [3])
