"""Box-to-patch geometry and the synthetic shape-world dataset."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_VERSION = "shapeworld-v1"

SPECIAL_WORDS = ("<pad>", "is", "there", "a", "?", "yes", "no")
# (word, RGB) pairs; colour is the only cue that identifies a class.
CLASSES = (
    ("cat", (0.90, 0.15, 0.15)),
    ("dog", (0.15, 0.80, 0.15)),
    ("car", (0.20, 0.30, 0.95)),
    ("cup", (0.95, 0.95, 0.15)),
    ("book", (0.90, 0.15, 0.90)),
    ("cake", (0.15, 0.90, 0.90)),
    ("bird", (0.95, 0.55, 0.10)),
    ("tree", (0.95, 0.95, 0.95)),
)
VOCAB = SPECIAL_WORDS + tuple(w for w, _ in CLASSES)
OBJECT_WORDS = tuple(w for w, _ in CLASSES)
QUESTION_TEMPLATE = ("is", "there", "a", None, "?")

BACKGROUND_AMPLITUDE = 0.1
OBJECT_NOISE = 0.1
PIXEL_DECIMALS = 3
MAX_PLACEMENT_TRIES = 200


class Vocab:
    def __init__(self, words: Sequence[str] = VOCAB):
        self.words = tuple(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.ids

    def id(self, word: str) -> int:
        try:
            return self.ids[word]
        except KeyError:
            raise KeyError(f"unknown word {word!r}; vocabulary: {', '.join(self.words)}") from None

    def word(self, idx: int) -> str:
        return self.words[idx]

    @property
    def yes(self) -> int:
        return self.ids["yes"]

    @property
    def no(self) -> int:
        return self.ids["no"]


DEFAULT_VOCAB = Vocab()


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, image_px: int | None = None) -> "BBox":
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self.as_list()}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"box {self.as_list()} has negative coordinates")
        if image_px is not None and (self.x1 > image_px or self.y1 > image_px):
            raise ValueError(f"box {self.as_list()} exceeds image size {image_px}")
        return self

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def overlaps(self, other: "BBox") -> bool:
        return self.x0 < other.x1 and other.x0 < self.x1 and self.y0 < other.y1 and other.y0 < self.y1

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


def bbox_to_patch_set(box: BBox, grid_side: int, patch_px: int) -> frozenset[int]:
    """Row-major indices of patches whose pixel square overlaps ``box`` with positive area."""
    box.validate(grid_side * patch_px)
    c0, c1 = box.x0 // patch_px, -(-box.x1 // patch_px)
    r0, r1 = box.y0 // patch_px, -(-box.y1 // patch_px)
    return frozenset(r * grid_side + c for r in range(r0, r1) for c in range(c0, c1))


def patch_mask(indices: Iterable[int], grid_side: int) -> np.ndarray:
    mask = np.zeros(grid_side * grid_side, dtype=bool)
    mask[list(indices)] = True
    return mask.reshape(grid_side, grid_side)


@dataclass(frozen=True)
class GroundingSpec:
    """Concept token ids plus the positive patch set ``P'`` (empty when the object is absent)."""

    concept: tuple[int, ...]
    n_patches: int
    positives: frozenset[int] = frozenset()
    bbox: BBox | None = None

    def __post_init__(self):
        if not self.concept:
            raise ValueError("concept token set is empty")
        if self.bbox is None and self.positives:
            raise ValueError("positives given without a bounding box")
        if any(not 0 <= s < self.n_patches for s in self.positives):
            raise ValueError("positive patch index outside the patch grid")

    @classmethod
    def from_bbox(
        cls, concept: Sequence[int], bbox: BBox | None, grid_side: int, patch_px: int
    ) -> "GroundingSpec":
        positives = frozenset() if bbox is None else bbox_to_patch_set(bbox, grid_side, patch_px)
        return cls(tuple(int(c) for c in concept), grid_side * grid_side, positives, bbox)

    @property
    def negatives(self) -> frozenset[int]:
        return frozenset(range(self.n_patches)) - self.positives


def tokenize_question(word: str, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
    if word not in vocab:
        raise KeyError(f"unknown word {word!r}; vocabulary: {', '.join(vocab.words)}")
    return [vocab.id(word if w is None else w) for w in QUESTION_TEMPLATE]


def detokenize(ids: Sequence[int], vocab: Vocab = DEFAULT_VOCAB) -> str:
    return " ".join(vocab.word(i) for i in ids)


@dataclass
class ShapeWorldExample:
    image_id: int
    image: np.ndarray
    objects: list[tuple[str, BBox]]
    question: list[int]
    answer: list[int]
    concept: str
    grid_side: int = 8
    patch_px: int = 4
    _grounding: GroundingSpec | None = field(default=None, repr=False, compare=False)

    @property
    def is_yes(self) -> bool:
        return any(w == self.concept for w, _ in self.objects)

    @property
    def concept_box(self) -> BBox | None:
        for w, box in self.objects:
            if w == self.concept:
                return box
        return None

    def grounding(self, vocab: Vocab = DEFAULT_VOCAB) -> GroundingSpec:
        if self._grounding is None:
            self._grounding = GroundingSpec.from_bbox(
                [vocab.id(self.concept)], self.concept_box, self.grid_side, self.patch_px
            )
        return self._grounding


def _canonical_pixels(img: np.ndarray) -> np.ndarray:
    # Pass through the manifest's text form so in-memory and reloaded images match bit for bit.
    flat = np.round(img.reshape(-1), PIXEL_DECIMALS)
    return np.array([float(f"{x:.9g}") for x in flat.tolist()]).reshape(img.shape)


def _render(rng: np.random.Generator, objects: list[tuple[str, BBox]], side: int) -> np.ndarray:
    img = rng.uniform(0.0, BACKGROUND_AMPLITUDE, size=(side, side, 3))
    colours = dict(CLASSES)
    for word, box in objects:
        h, w = box.height, box.width
        patch = np.asarray(colours[word]) + rng.uniform(-OBJECT_NOISE / 2, OBJECT_NOISE / 2, size=(h, w, 3))
        img[box.y0 : box.y1, box.x0 : box.x1] = patch
    return _canonical_pixels(np.clip(img, 0.0, 1.0))


def _place_objects(
    rng: np.random.Generator, words: Sequence[str], side: int, patch_px: int
) -> list[tuple[str, BBox]]:
    lo, hi = patch_px + 2, 3 * patch_px + 1
    if side < lo:
        raise ValueError(f"image of {side}px is too small for objects of at least {lo}px")
    hi = min(hi, side)
    placed: list[tuple[str, BBox]] = []
    for word in words:
        for _ in range(MAX_PLACEMENT_TRIES):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0 = int(rng.integers(0, side - w + 1))
            y0 = int(rng.integers(0, side - h + 1))
            box = BBox(x0, y0, x0 + w, y0 + h)
            if not any(box.overlaps(b) for _, b in placed):
                placed.append((word, box))
                break
        else:
            raise ValueError(f"could not place {len(words)} non-overlapping shapes in a {side}px image")
    return placed


def generate_dataset(
    n_images: int,
    grid_side: int = 8,
    patch_px: int = 4,
    seed: int = 0,
    vocab: Vocab = DEFAULT_VOCAB,
    max_objects: int = 3,
) -> list[ShapeWorldExample]:
    """Images with 1..max_objects rectangles; per image, one yes-question per object and one no-question."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if not 1 <= max_objects < len(OBJECT_WORDS):
        raise ValueError("max_objects must leave at least one absent class")
    side = grid_side * patch_px
    rng = np.random.default_rng(seed)
    examples = []
    for image_id in range(n_images):
        k = int(rng.integers(1, max_objects + 1))
        order = rng.permutation(len(OBJECT_WORDS))
        present = [OBJECT_WORDS[i] for i in order[:k]]
        absent = [OBJECT_WORDS[order[k]]]
        objects = _place_objects(rng, present, side, patch_px)
        image = _render(rng, objects, side)
        for word, answer in [(w, "yes") for w in present] + [(w, "no") for w in absent]:
            examples.append(
                ShapeWorldExample(
                    image_id=image_id,
                    image=image,
                    objects=objects,
                    question=tokenize_question(word, vocab),
                    answer=[vocab.id(answer)],
                    concept=word,
                    grid_side=grid_side,
                    patch_px=patch_px,
                )
            )
    return examples


def manifest_header(grid_side: int, patch_px: int, vocab: Vocab = DEFAULT_VOCAB, **extra) -> dict:
    return {"version": MANIFEST_VERSION, "G": grid_side, "p": patch_px, "vocab": list(vocab.words), **extra}


def _record_line(ex: ShapeWorldExample) -> str:
    pixels = ",".join(f"{x:.9g}" for x in ex.image.reshape(-1).tolist())
    objects = json.dumps([{"word": w, "bbox": b.as_list()} for w, b in ex.objects])
    return (
        f'{{"image_id": {ex.image_id}, "image": [{pixels}], "objects": {objects}, '
        f'"question": {json.dumps(ex.question)}, "answer": {json.dumps(ex.answer)}, '
        f'"concept": {json.dumps(ex.concept)}}}'
    )


def write_manifest(path, examples: Sequence[ShapeWorldExample], header: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header) + "\n")
        for ex in examples:
            f.write(_record_line(ex) + "\n")


def read_manifest(path) -> tuple[dict, list[ShapeWorldExample]]:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {header.get('version')!r}")
        G, p = int(header["G"]), int(header["p"])
        side = G * p
        images: dict[int, np.ndarray] = {}
        examples = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            rec = json.loads(line)
            image_id = int(rec["image_id"])
            if image_id not in images:
                pixels = np.asarray(rec["image"], dtype=np.float64)
                if pixels.size != side * side * 3:
                    raise ValueError(f"{path}:{lineno}: image has {pixels.size} values, expected {side * side * 3}")
                images[image_id] = pixels.reshape(side, side, 3)
            objects = [(o["word"], BBox(*o["bbox"]).validate(side)) for o in rec["objects"]]
            examples.append(
                ShapeWorldExample(
                    image_id=image_id,
                    image=images[image_id],
                    objects=objects,
                    question=[int(t) for t in rec["question"]],
                    answer=[int(t) for t in rec["answer"]],
                    concept=rec["concept"],
                    grid_side=G,
                    patch_px=p,
                )
            )
    return header, examples


def class_histogram(examples: Iterable[ShapeWorldExample]) -> dict[str, int]:
    """Number of distinct images each object word appears in."""
    seen: dict[int, set[str]] = {}
    for ex in examples:
        seen.setdefault(ex.image_id, set()).update(w for w, _ in ex.objects)
    counts = Counter(w for words in seen.values() for w in words)
    return {w: counts.get(w, 0) for w in OBJECT_WORDS}


def vocab_from_header(header: dict) -> Vocab:
    return Vocab(header["vocab"])


def patch_count_bound(box: BBox, patch_px: int) -> int:
    return (math.ceil(box.width / patch_px) + 1) * (math.ceil(box.height / patch_px) + 1)
