"""Teacher-forced training with gradient accumulation and Adam."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .config import TrainConfig
from .grounding import ShapeWorldExample, Vocab, DEFAULT_VOCAB
from .loss import LossBreakdown, total_loss
from .model import ModelParams, forward, init_params

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in params}
        self.v = {k: np.zeros(p.shape) for k, p in params}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class StepRecord:
    step: int
    l_ntp: float
    l_lll: float
    l_total: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "l_ntp": self.l_ntp, "l_lll": self.l_lll, "l_total": self.l_total})


@dataclass
class TrainResult:
    params: ModelParams
    config: TrainConfig
    history: list[StepRecord] = field(default_factory=list)
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    def epoch_means(self, steps_per_epoch: int) -> list[float]:
        totals = [r.l_total for r in self.history]
        return [float(np.mean(totals[i : i + steps_per_epoch])) for i in range(0, len(totals), steps_per_epoch)]


def example_gradients(
    params: ModelParams,
    ex: ShapeWorldExample,
    config: TrainConfig,
    vocab: Vocab = DEFAULT_VOCAB,
) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    trace = forward(params, ex.image, ex.question, ex.answer)
    loss, breakdown = total_loss(trace, ex.answer, ex.grounding(vocab), config.lam, config.loss)
    grads = nc.backward(loss)
    out = {}
    for name, p in params:
        g = grads.get(p)
        out[name] = np.zeros(p.shape) if g is None else g
    return out, breakdown


def train(
    examples: Sequence[ShapeWorldExample],
    config: TrainConfig,
    vocab: Vocab = DEFAULT_VOCAB,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    if not examples:
        raise ValueError("no training examples")
    params = init_params(config.model)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(params=params, config=config)
    n = len(examples)
    steps_per_epoch = -(-n // config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            acc = {name: np.zeros(p.shape) for name, p in params}
            l_ntp = l_lll = l_total = 0.0
            for ex in batch:
                try:
                    grads, br = example_gradients(params, ex, config, vocab)
                except nc.NumericError as e:
                    raise nc.NumericError(f"step {result.step}, image {ex.image_id}: {e}") from None
                for name in acc:
                    acc[name] += grads[name]
                l_ntp += br.l_ntp
                l_lll += br.l_lll
                l_total += br.l_total
            k = len(batch)
            for name in acc:
                acc[name] /= k
            record = StepRecord(result.step, l_ntp / k, l_lll / k, l_total / k)
            if not np.isfinite(record.l_total) or not all(np.all(np.isfinite(g)) for g in acc.values()):
                raise nc.NumericError(f"non-finite loss or gradient at step {result.step}")
            opt.step(acc)
            result.history.append(record)
            result.step += 1
            if on_step is not None:
                on_step(record)
        log.info("epoch %d: mean l_total %.4f", epoch, np.mean([r.l_total for r in result.history[-steps_per_epoch:]]))
    result.rng_state = rng.bit_generator.state
    return result
