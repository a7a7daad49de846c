"""Grounding and answer-quality metrics on shape-world examples."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grounding import DEFAULT_VOCAB, ShapeWorldExample, Vocab, patch_mask
from .lens import ConfidenceMap, confidence_map
from .model import ForwardTrace, ModelParams, forward, generate_answer

METRICS = ("ratio", "attn", "iou", "acc")
THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))
THREADS_ENV = "PATCHLENS_THREADS"


def _positives(positives: Iterable[int]) -> list[int]:
    idx = sorted(int(s) for s in positives)
    if not idx:
        raise ValueError("positive patch set is empty")
    return idx


def object_confidence_ratio(cmap: ConfidenceMap | np.ndarray, positives: Iterable[int]) -> float:
    """Mean map value inside ``positives`` over the mean across all patches."""
    values = cmap.flat if isinstance(cmap, ConfidenceMap) else np.asarray(cmap, dtype=np.float64).reshape(-1)
    idx = _positives(positives)
    overall = values.mean()
    if overall == 0:
        raise ValueError("confidence map is all zeros; ratio undefined")
    return float(values[idx].mean() / overall)


def attention_ratio(
    trace_or_weights: ForwardTrace | np.ndarray,
    positives: Iterable[int],
    position: int | None = None,
    n_visual: int | None = None,
) -> float:
    """Attention of the answer-producing position onto ``positives`` relative to all visual tokens.

    ``trace_or_weights`` is a trace (heads and layers are averaged) or a
    single attention row / matrix. ``position`` defaults to the position that
    predicts the final answer token.
    """
    idx = _positives(positives)
    if isinstance(trace_or_weights, ForwardTrace):
        trace = trace_or_weights
        weights = trace.mean_attention()
        n_visual = trace.layout.n_visual
        if position is None:
            position = trace.layout.predict_positions[-1]
    else:
        weights = np.asarray(trace_or_weights, dtype=np.float64)
    row = weights[position] if weights.ndim == 2 else weights
    if n_visual is None:
        raise ValueError("n_visual is required when passing raw attention weights")
    visual = row[:n_visual]
    overall = visual.mean()
    if overall == 0:
        raise ValueError("no attention on visual tokens; ratio undefined")
    return float(visual[idx].mean() / overall)


def threshold_segmentation(cmap: ConfidenceMap | np.ndarray, threshold: float) -> np.ndarray:
    grid = cmap.grid if isinstance(cmap, ConfidenceMap) else np.asarray(cmap)
    return grid >= threshold


def ciou(masks: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Cumulative IoU: summed intersections over summed unions."""
    inter = union = 0
    for pred, gt in masks:
        pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        inter += int(np.logical_and(pred, gt).sum())
        union += int(np.logical_or(pred, gt).sum())
    if union == 0:
        raise ValueError("all unions are empty; cIoU undefined")
    return inter / union


def yes_no_accuracy(params: ModelParams, examples: Sequence[ShapeWorldExample]) -> float:
    if not examples:
        raise ValueError("empty dataset")
    hits = [generate_answer(params, ex.image, ex.question, len(ex.answer)) == list(ex.answer) for ex in examples]
    return float(np.mean(hits))


def select_threshold(
    maps: Sequence[np.ndarray], gts: Sequence[np.ndarray], thresholds: Sequence[float] = THRESHOLDS
) -> tuple[float, float]:
    """Threshold with the best cIoU; ties go to the lower threshold."""
    best_t, best = thresholds[0], -1.0
    for t in thresholds:
        score = ciou([(m >= t, g) for m, g in zip(maps, gts)])
        if score > best:
            best_t, best = t, score
    return best_t, best


@dataclass
class ExampleRecord:
    image_id: int
    concept: str
    answer: int
    predicted: int
    correct: bool
    confidence_ratio: float | None = None
    attention_ratio: float | None = None
    intersection: int | None = None
    union: int | None = None


@dataclass
class EvalReport:
    model_tag: str
    dataset_id: str
    threshold: float | None
    metrics: tuple[str, ...]
    records: list[ExampleRecord] = field(default_factory=list)

    @property
    def yes_records(self) -> list[ExampleRecord]:
        return [r for r in self.records if r.confidence_ratio is not None or r.intersection is not None or r.attention_ratio is not None]

    def aggregate(self) -> dict[str, float]:
        out: dict[str, float] = {}
        if "acc" in self.metrics:
            out["accuracy"] = float(np.mean([r.correct for r in self.records]))
        if "ratio" in self.metrics:
            out["confidence_ratio"] = float(np.mean([r.confidence_ratio for r in self.records if r.confidence_ratio is not None]))
        if "attn" in self.metrics:
            out["attention_ratio"] = float(np.mean([r.attention_ratio for r in self.records if r.attention_ratio is not None]))
        if "iou" in self.metrics:
            inter = sum(r.intersection for r in self.records if r.intersection is not None)
            union = sum(r.union for r in self.records if r.union is not None)
            out["ciou"] = inter / union if union else float("nan")
        return out

    def table(self) -> str:
        agg = self.aggregate()
        lines = [
            f"model={self.model_tag} data={self.dataset_id} examples={len(self.records)}"
            + (f" threshold={self.threshold:.2f}" if self.threshold is not None else ""),
            f"{'metric':<18}{'value':>12}",
        ]
        lines += [f"{k:<18}{v:>12.6f}" for k, v in agg.items()]
        return "\n".join(lines)

    def write_records(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"model_tag": self.model_tag, "dataset_id": self.dataset_id,
                                "threshold": self.threshold, "metrics": list(self.metrics),
                                "aggregate": self.aggregate()}) + "\n")
            for r in self.records:
                f.write(json.dumps(asdict(r)) + "\n")


def read_records(path) -> tuple[dict, list[ExampleRecord]]:
    with open(path, encoding="utf-8") as f:
        head = json.loads(f.readline())
        return head, [ExampleRecord(**json.loads(line)) for line in f if line.strip()]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def example_maps(
    params: ModelParams, examples: Sequence[ShapeWorldExample], vocab: Vocab = DEFAULT_VOCAB, mode: str = "last-layer"
) -> list[np.ndarray]:
    def one(ex):
        return confidence_map(forward(params, ex.image, ex.question), [vocab.id(ex.concept)], mode).grid

    return _ordered_map(one, examples)


def calibrate_threshold(
    params: ModelParams, val_examples: Sequence[ShapeWorldExample], vocab: Vocab = DEFAULT_VOCAB
) -> float:
    yes = [ex for ex in val_examples if ex.is_yes]
    maps = example_maps(params, yes, vocab)
    gts = [patch_mask(ex.grounding(vocab).positives, ex.grid_side) for ex in yes]
    return select_threshold(maps, gts)[0]


def evaluate(
    params: ModelParams,
    examples: Sequence[ShapeWorldExample],
    metrics: Sequence[str] = METRICS,
    threshold: float | None = None,
    model_tag: str = "",
    dataset_id: str = "",
    vocab: Vocab = DEFAULT_VOCAB,
) -> EvalReport:
    """Per-example metrics; grounding metrics are computed on examples whose queried object is present."""
    if not examples:
        raise ValueError("empty dataset")
    metrics = tuple(metrics)
    for m in metrics:
        if m not in METRICS:
            raise ValueError(f"unknown metric {m!r}; expected a subset of {METRICS}")
    if "iou" in metrics and threshold is None:
        raise ValueError("iou needs a segmentation threshold")

    def one(ex: ShapeWorldExample) -> ExampleRecord:
        trace = forward(params, ex.image, ex.question)
        predicted = int(np.argmax(trace.logits.data[-1]))
        rec = ExampleRecord(ex.image_id, ex.concept, ex.answer[0], predicted, predicted == ex.answer[0])
        if not ex.is_yes:
            return rec
        g = ex.grounding(vocab)
        if "ratio" in metrics or "iou" in metrics:
            cmap = confidence_map(trace, g.concept)
            if "ratio" in metrics:
                rec.confidence_ratio = object_confidence_ratio(cmap, g.positives)
            if "iou" in metrics:
                pred = threshold_segmentation(cmap, threshold)
                gt = patch_mask(g.positives, ex.grid_side)
                rec.intersection = int(np.logical_and(pred, gt).sum())
                rec.union = int(np.logical_or(pred, gt).sum())
        if "attn" in metrics:
            rec.attention_ratio = attention_ratio(trace, g.positives)
        return rec

    records = _ordered_map(one, examples)
    return EvalReport(model_tag, dataset_id, threshold, metrics, records)
