"""Seed-matched ntp vs ntp+lll comparison on fresh shape-world splits."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .config import ModelConfig, TrainConfig
from .grounding import DEFAULT_VOCAB, ShapeWorldExample, generate_dataset
from .metrics import EvalReport, calibrate_threshold, evaluate
from .train import TrainResult, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComparisonConfig:
    n_train: int = 512
    n_val: int = 128
    n_test: int = 128
    grid_side: int = 8
    patch_px: int = 4
    epochs: int = 10
    lam: float = 0.5
    # NTP alone stays on its constant-answer plateau for 10 epochs at the
    # model defaults (std 0.02, lr 3e-4); this is the smallest tested recipe that escapes it
    lr: float = 1e-3
    init_std: float = 0.2
    batch_size: int = 8
    seed: int = 0
    # distinct generator seeds keep the three splits disjoint draws
    train_seed: int = 1
    val_seed: int = 2
    test_seed: int = 3

    def train_config(self, mode: str) -> TrainConfig:
        model = ModelConfig(grid_side=self.grid_side, patch_px=self.patch_px, init_std=self.init_std, seed=self.seed)
        return TrainConfig(loss=mode, lam=self.lam, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed, model=model)


@dataclass
class Splits:
    train: list[ShapeWorldExample]
    val: list[ShapeWorldExample]
    test: list[ShapeWorldExample]


@dataclass
class ModeResult:
    training: TrainResult
    threshold: float
    report: EvalReport
    seconds: float

    @property
    def metrics(self) -> dict[str, float]:
        return self.report.aggregate()


@dataclass
class Comparison:
    config: ComparisonConfig
    results: dict[str, ModeResult] = field(default_factory=dict)

    def table(self) -> str:
        modes = list(self.results)
        keys = list(self.results[modes[0]].metrics) + ["threshold", "seconds"]
        lines = [f"{'':<18}" + "".join(f"{m:>12}" for m in modes)]
        for k in keys:
            vals = []
            for m in modes:
                r = self.results[m]
                v = r.threshold if k == "threshold" else r.seconds if k == "seconds" else r.metrics[k]
                vals.append(f"{v:>12.4f}")
            lines.append(f"{k:<18}" + "".join(vals))
        return "\n".join(lines)


def make_splits(cfg: ComparisonConfig) -> Splits:
    def gen(n, seed):
        return generate_dataset(n, grid_side=cfg.grid_side, patch_px=cfg.patch_px, seed=seed)

    return Splits(gen(cfg.n_train, cfg.train_seed), gen(cfg.n_val, cfg.val_seed), gen(cfg.n_test, cfg.test_seed))


def run_mode(cfg: ComparisonConfig, splits: Splits, mode: str) -> ModeResult:
    t0 = time.perf_counter()
    result = train(splits.train, cfg.train_config(mode), DEFAULT_VOCAB)
    threshold = calibrate_threshold(result.params, splits.val)
    report = evaluate(result.params, splits.test, threshold=threshold, model_tag=mode, dataset_id="test")
    seconds = time.perf_counter() - t0
    log.info("%s: %s (%.0f s)", mode, report.aggregate(), seconds)
    return ModeResult(result, threshold, report, seconds)


def run_comparison(cfg: ComparisonConfig = ComparisonConfig(), modes=("ntp", "ntp+lll")) -> Comparison:
    splits = make_splits(cfg)
    out = Comparison(cfg)
    for mode in modes:
        out.results[mode] = run_mode(cfg, splits, mode)
    return out
