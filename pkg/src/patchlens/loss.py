"""Next-token loss, logit lens loss and their weighted sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .grounding import GroundingSpec
from .lens import lens_probs
from .model import ForwardTrace
from .numcore import Matrix

PROB_CLAMP = 1e-7
DEFAULT_LAMBDA = 0.5

__all__ = [
    "GroundingSpec",
    "LossBreakdown",
    "ntp_loss",
    "lll_from_hidden",
    "lll_loss",
    "lll_value",
    "total_loss",
]


@dataclass(frozen=True)
class LossBreakdown:
    l_ntp: float
    l_lll: float
    l_total: float
    lam: float
    n_pos: int
    n_neg: int
    n_answer: int

    def to_dict(self) -> dict:
        return asdict(self)


def ntp_loss(trace: ForwardTrace, answer: Sequence[int]) -> Matrix:
    answer = [int(t) for t in answer]
    if not answer:
        raise ValueError("answer is empty")
    if trace.logits.rows != len(answer):
        raise ValueError(
            f"trace predicts {trace.logits.rows} answer positions but {len(answer)} answer tokens were given"
        )
    return nc.cross_entropy(trace.logits, answer)


def lll_from_hidden(hidden: Matrix, U: Matrix, grounding: GroundingSpec) -> Matrix:
    """LLL over rows of ``hidden`` (one per visual token) against the concept tokens of ``grounding``."""
    if hidden.rows != grounding.n_patches:
        raise ValueError(f"{hidden.rows} hidden rows for a grounding over {grounding.n_patches} patches")
    pos = sorted(grounding.positives)
    neg = sorted(grounding.negatives)
    probs = lens_probs(hidden, U)
    terms = []
    for v in grounding.concept:
        if not 0 <= v < U.rows:
            raise ValueError(f"concept token id {v} outside vocabulary of size {U.rows}")
        p = nc.clip(nc.take_col(probs, v), PROB_CLAMP, 1.0 - PROB_CLAMP)
        term = None
        if pos:
            term = -nc.mean_all(nc.log(nc.take_rows(p, pos)))
        if neg:
            t_neg = -nc.mean_all(nc.log(1.0 - nc.take_rows(p, neg)))
            term = t_neg if term is None else term + t_neg
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nc.scale(total, 1.0 / len(terms)) if len(terms) > 1 else total


def lll_loss(trace: ForwardTrace, grounding: GroundingSpec) -> Matrix:
    """LLL on the last layer's visual tokens."""
    hidden = nc.take_rows(trace.final, list(trace.layout.visual))
    return lll_from_hidden(hidden, trace.params.unembed, grounding)


def lll_value(trace: ForwardTrace, grounding: GroundingSpec) -> float:
    """Same value as :func:`lll_loss` without touching the tape."""
    h = trace.final.data[: trace.layout.n_visual]
    z = h @ trace.params.unembed.data.T
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    pos = sorted(grounding.positives)
    neg = sorted(grounding.negatives)
    terms = []
    for v in grounding.concept:
        pv = np.clip(p[:, v], PROB_CLAMP, 1.0 - PROB_CLAMP)
        t = 0.0
        if pos:
            t += -np.mean(np.log(pv[pos]))
        if neg:
            t += -np.mean(np.log(1.0 - pv[neg]))
        terms.append(t)
    return float(np.mean(terms))


def total_loss(
    trace: ForwardTrace,
    answer: Sequence[int],
    grounding: GroundingSpec,
    lam: float = DEFAULT_LAMBDA,
    mode: str = "ntp+lll",
) -> tuple[Matrix, LossBreakdown]:
    """``l_ntp + lam * l_lll``. In ``ntp`` mode the LLL is only measured, and the recorded weight is 0."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    l_ntp = ntp_loss(trace, answer)
    if mode == "ntp+lll":
        l_lll = lll_loss(trace, grounding)
        total = l_ntp + nc.scale(l_lll, lam)
        lll_val, weight = l_lll.item(), lam
    elif mode == "ntp":
        total = l_ntp
        lll_val, weight = lll_value(trace, grounding), 0.0
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return total, LossBreakdown(
        l_ntp=l_ntp.item(),
        l_lll=lll_val,
        l_total=total.item(),
        lam=weight,
        n_pos=len(grounding.positives),
        n_neg=len(grounding.negatives),
        n_answer=len(answer),
    )
