"""Logit lens: read hidden states as distributions over the vocabulary."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .model import ForwardTrace
from .numcore import Matrix

MODES = ("last-layer", "max-over-layers")


@dataclass(frozen=True)
class VocabDistribution:
    logits: np.ndarray
    probs: np.ndarray
    layer: int | None = None
    position: int | None = None


@dataclass(frozen=True)
class ConfidenceMap:
    grid: np.ndarray
    concept: tuple[int, ...]
    layer: int
    mode: str = "last-layer"
    checkpoint_id: str = ""

    @property
    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)


def project(h, U, layer: int | None = None, position: int | None = None) -> VocabDistribution:
    """``z = U h`` and ``p = softmax(z)`` for a single hidden state ``h``."""
    U = U.data if isinstance(U, Matrix) else np.asarray(U, dtype=np.float64)
    h = h.data if isinstance(h, Matrix) else np.asarray(h, dtype=np.float64)
    h = h.reshape(-1)
    if U.ndim != 2 or U.shape[1] != h.size:
        raise nc.ShapeError(f"project: U shape {U.shape} incompatible with hidden size {h.size}")
    z = U @ h
    e = np.exp(z - z.max())
    return VocabDistribution(z, e / e.sum(), layer, position)


def lens_probs(hidden: Matrix, U: Matrix) -> Matrix:
    """Row-wise lens distributions as a differentiable node (rows = positions)."""
    return nc.softmax_rows(hidden @ U.T)


def _check_concept(concept: Sequence[int], vocab_size: int) -> tuple[int, ...]:
    ids = tuple(int(v) for v in concept)
    if not ids:
        raise ValueError("concept token set is empty")
    for v in ids:
        if not 0 <= v < vocab_size:
            raise ValueError(f"concept token id {v} outside vocabulary of size {vocab_size}")
    return ids


def concept_probability(dist: VocabDistribution, concept: Sequence[int]) -> float:
    ids = _check_concept(concept, dist.probs.size)
    return float(np.mean(dist.probs[list(ids)]))


def _patch_concept_probs(trace: ForwardTrace, layer: int, ids: tuple[int, ...]) -> np.ndarray:
    n_vis = trace.layout.n_visual
    h = trace.hidden(layer).data[:n_vis]
    z = h @ trace.params.unembed.data.T
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[:, list(ids)].mean(axis=1)


def confidence_map(
    trace: ForwardTrace,
    concept: Sequence[int],
    mode: str = "last-layer",
    checkpoint_id: str = "",
) -> ConfidenceMap:
    if mode not in MODES:
        raise ValueError(f"unknown map mode {mode!r}; expected one of {MODES}")
    config = trace.params.config
    ids = _check_concept(concept, config.vocab_size)
    L = trace.n_layers
    if mode == "last-layer":
        values = _patch_concept_probs(trace, L, ids)
    else:
        values = np.max([_patch_concept_probs(trace, l, ids) for l in range(1, L + 1)], axis=0)
    G = config.grid_side
    return ConfidenceMap(values.reshape(G, G), ids, L, mode, checkpoint_id)
