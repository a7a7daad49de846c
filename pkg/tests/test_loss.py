import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlens import numcore as nc
from patchlens.config import ModelConfig
from patchlens.fdcheck import numeric_grad, rel_error
from patchlens.grounding import BBox, GroundingSpec
from patchlens.loss import lll_from_hidden, lll_loss, lll_value, ntp_loss, total_loss
from patchlens.model import forward, init_params

CFG = ModelConfig(d_model=12, n_layers=2, n_heads=3, vocab_size=10, grid_side=3, patch_px=2, max_text_len=4,
                  init_std=0.3, seed=2)


def two_token_hidden(probs):
    """Hidden rows that, under U = I_2, give p(token 0) = probs[i]."""
    rows = [[math.log(p), math.log(1 - p)] if 0 < p < 1 else ([60.0, -60.0] if p == 1 else [-60.0, 60.0])
            for p in probs]
    return nc.param(np.array(rows)), nc.param(np.eye(2))


def spec(positives, n, concept=(0,)):
    return GroundingSpec(tuple(concept), n, frozenset(positives), BBox(0, 0, 1, 1) if positives else None)


class FixedTrace:
    """Just enough of a ForwardTrace for ntp_loss."""

    def __init__(self, logits):
        self.logits = logits


def test_ntp_perfect_prediction_is_zero():
    logits = nc.const(np.array([[800.0, 0, 0], [0, 0, 800.0]]))
    assert ntp_loss(FixedTrace(logits), [0, 2]).item() == 0.0


def test_ntp_uniform_is_log_vocab():
    for n in (1, 3):
        assert ntp_loss(FixedTrace(nc.const(np.zeros((n, 24)))), [5] * n).item() == pytest.approx(math.log(24), abs=1e-12)


def test_ntp_direct_evaluation():
    # p(t1) = 0.5 and p(t2) = 0.25 via log-probability logits
    logits = nc.const(np.log([[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]]))
    value = ntp_loss(FixedTrace(logits), [0, 0]).item()
    assert value == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert value == pytest.approx(1.0397, abs=1e-4)


def test_ntp_empty_answer():
    with pytest.raises(ValueError):
        ntp_loss(FixedTrace(nc.const(np.zeros((1, 3)))), [])


def test_lll_perfect_grounding():
    h, U = two_token_hidden([1.0, 1.0, 1.0])
    assert lll_from_hidden(h, U, spec({0, 1, 2}, 3)).item() <= 1e-6


def test_lll_direct_evaluation():
    h, U = two_token_hidden([0.5, 0.25])
    value = lll_from_hidden(h, U, spec({0}, 2)).item()
    assert value == pytest.approx(-math.log(0.5) - math.log(0.75), abs=1e-12)
    assert value == pytest.approx(0.98083, abs=1e-5)


def test_lll_absent_object():
    h, U = two_token_hidden([0.0, 0.0, 0.0, 0.0])
    assert lll_from_hidden(h, U, spec(set(), 4)).item() <= 1e-6


def test_lll_multi_token_mean():
    rng = np.random.default_rng(0)
    h, U = nc.param(rng.normal(size=(4, 3))), nc.param(rng.normal(size=(5, 3)))
    both = lll_from_hidden(h, U, spec({1, 2}, 4, concept=(0, 3))).item()
    a = lll_from_hidden(h, U, spec({1, 2}, 4, concept=(0,))).item()
    b = lll_from_hidden(h, U, spec({1, 2}, 4, concept=(3,))).item()
    assert both == pytest.approx((a + b) / 2, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=8), st.data())
def test_lll_nonnegative_and_permutation_invariant(probs, data):
    n = len(probs)
    pos = data.draw(st.sets(st.integers(0, n - 1)))
    h, U = two_token_hidden(probs)
    base = lll_from_hidden(h, U, spec(pos, n)).item()
    assert base >= 0
    perm = np.array(data.draw(st.permutations(range(n))))
    # permute rows only within P' and within its complement
    order = np.arange(n)
    inside, outside = sorted(pos), sorted(set(range(n)) - pos)
    order[inside] = np.array(inside)[np.argsort(perm[inside])] if inside else order[inside]
    order[outside] = np.array(outside)[np.argsort(perm[outside])] if outside else order[outside]
    h2 = nc.param(h.data[order])
    assert lll_from_hidden(h2, U, spec(pos, n)).item() == pytest.approx(base, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.05, 0.9), min_size=2, max_size=6), st.data())
def test_lll_monotone(probs, data):
    n = len(probs)
    pos = data.draw(st.sets(st.integers(0, n - 1), min_size=1, max_size=n - 1))
    s = data.draw(st.integers(0, n - 1))
    h, U = two_token_hidden(probs)
    base = lll_from_hidden(h, U, spec(pos, n)).item()
    bumped = list(probs)
    bumped[s] += 0.05
    after = lll_from_hidden(*two_token_hidden(bumped), spec(pos, n)).item()
    assert (after < base) if s in pos else (after > base)


@pytest.mark.parametrize("seed", range(20))
def test_lll_gradient_wrt_hidden_matches_fd(seed):
    rng = np.random.default_rng(seed)
    n, d, V = 5, 4, 6
    h0, U0 = rng.normal(size=(n, d)), rng.normal(size=(V, d))
    s = spec(set(rng.choice(n, size=2, replace=False).tolist()), n, concept=(int(rng.integers(V)),))
    h = nc.param(h0)
    g = nc.backward(lll_from_hidden(h, nc.const(U0), s))[h]
    fd = numeric_grad(lambda x: lll_from_hidden(nc.const(x), nc.const(U0), s).item(), h0.copy())
    assert rel_error(g, fd) < 1e-5


def _trace(seed=0):
    params = init_params(CFG)
    rng = np.random.default_rng(seed)
    return params, forward(params, rng.uniform(size=(6, 6, 3)), [1, 2, 3], [4])


def test_total_loss_breakdown_and_lambda_zero():
    params, trace = _trace()
    g = GroundingSpec.from_bbox([4], BBox(0, 0, 3, 3), 3, 2)
    total, br = total_loss(trace, [4], g, lam=0.5)
    assert br.l_total == br.l_ntp + 0.5 * br.l_lll
    assert br.n_pos == 4 and br.n_neg == 5 and br.n_answer == 1
    assert br.l_lll == pytest.approx(lll_value(trace, g), abs=1e-14)
    zero, brz = total_loss(trace, [4], g, lam=0.0)
    assert zero.item() == ntp_loss(trace, [4]).item()
    with pytest.raises(ValueError):
        total_loss(trace, [4], g, lam=-0.1)


def test_total_combination_arithmetic():
    assert 1.0 + 0.5 * 0.98083 == pytest.approx(1.490415, abs=1e-6)


def test_total_gradient_is_linear_combination():
    params, trace = _trace(3)
    g = GroundingSpec.from_bbox([4], BBox(1, 1, 5, 4), 3, 2)
    lam = 0.5
    total, _ = total_loss(trace, [4], g, lam=lam)
    g_total = nc.backward(total)
    g_ntp = nc.backward(ntp_loss(trace, [4]))
    g_lll = nc.backward(lll_loss(trace, g))
    for _, p in params:
        expected = g_ntp.get(p, 0.0) + lam * g_lll.get(p, 0.0)
        assert rel_error(g_total[p], expected) < 1e-10


def test_total_loss_fd_through_model():
    params, _ = _trace()
    rng = np.random.default_rng(5)
    image = rng.uniform(size=(6, 6, 3))
    g = GroundingSpec.from_bbox([4], BBox(0, 2, 4, 6), 3, 2)
    target = params["layers.1.attn.wk"]

    def value(x):
        old, target.data = target.data, x
        try:
            return total_loss(forward(params, image, [1, 2], [4]), [4], g)[0].item()
        finally:
            target.data = old

    grad = nc.backward(total_loss(forward(params, image, [1, 2], [4]), [4], g)[0])[target]
    assert rel_error(grad, numeric_grad(value, target.data.copy())) < 1e-5
