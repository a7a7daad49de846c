import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlens.config import ModelConfig
from patchlens.lens import VocabDistribution, concept_probability, confidence_map, project
from patchlens.model import forward, init_params
from patchlens.numcore import ShapeError


def test_zero_hidden_gives_uniform():
    U = np.random.default_rng(0).normal(size=(24, 48))
    dist = project(np.zeros(48), U)
    np.testing.assert_allclose(dist.probs, np.full(24, 1 / 24), rtol=1e-14)


def test_identity_unembedding_closed_form():
    dist = project([0.0, math.log(2), math.log(3)], np.eye(3))
    np.testing.assert_allclose(dist.probs, [1 / 6, 1 / 3, 1 / 2], rtol=1e-14)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_projection_normalised(seed):
    rng = np.random.default_rng(seed)
    dist = project(rng.normal(size=8), rng.normal(size=(5, 8)) * 3)
    assert abs(dist.probs.sum() - 1) <= 1e-12
    assert np.all(dist.probs > 0) and np.all(dist.probs < 1)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(-20, 20))
def test_constant_logit_shift_invariance(seed, c):
    # Appending a constant feature whose U column is all-c adds c to every logit.
    rng = np.random.default_rng(seed)
    h, U = rng.normal(size=6), rng.normal(size=(5, 6))
    shifted = project(np.append(h, 1.0), np.hstack([U, np.full((5, 1), c)]))
    np.testing.assert_allclose(shifted.probs, project(h, U).probs, rtol=1e-9)


def test_project_dimension_mismatch():
    with pytest.raises(ShapeError):
        project(np.zeros(4), np.zeros((3, 5)))


def test_concept_probability_rules():
    p = np.array([0.7, 0.2, 0.1])
    dist = VocabDistribution(np.log(p), p)
    assert concept_probability(dist, [0]) == pytest.approx(0.7)
    p2 = np.array([0.2, 0.4, 0.3, 0.1])
    assert concept_probability(VocabDistribution(np.log(p2), p2), [0, 1]) == pytest.approx(0.3)
    assert concept_probability(VocabDistribution(np.log(p2), p2), range(4)) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        concept_probability(dist, [])
    with pytest.raises(ValueError):
        concept_probability(dist, [3])


CFG = ModelConfig(d_model=12, n_layers=2, n_heads=3, vocab_size=10, grid_side=3, patch_px=2, max_text_len=4,
                  init_std=0.3, seed=1)


def test_rigged_dominant_patch():
    params = init_params(CFG)
    # patch 4 points far along U's row for token 3; every other patch is the zero vector
    trace = forward(params, np.random.default_rng(0).uniform(size=(6, 6, 3)), [1])
    U = params.unembed.data
    h = trace.final.data.copy()
    h[:] = 0.0
    h[4] = 50.0 * U[3] / np.linalg.norm(U[3])
    trace.final.data = h
    grid = confidence_map(trace, [3]).flat
    assert grid[4] > 0.99
    others = np.delete(grid, 4)
    np.testing.assert_allclose(others, 1 / 10, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_max_over_layers_dominates(seed):
    params = init_params(ModelConfig(**{**CFG.to_dict(), "seed": seed}))
    trace = forward(params, np.random.default_rng(seed).uniform(size=(6, 6, 3)), [1, 2])
    last = confidence_map(trace, [2, 5])
    best = confidence_map(trace, [2, 5], mode="max-over-layers")
    assert np.all(last.grid <= best.grid)
    assert np.all((best.grid >= 0) & (best.grid <= 1))
    assert last.grid.shape == (3, 3) and last.layer == 2 and last.concept == (2, 5)


def test_unknown_mode():
    params = init_params(CFG)
    trace = forward(params, np.zeros((6, 6, 3)), [1])
    with pytest.raises(ValueError):
        confidence_map(trace, [1], mode="mean")
