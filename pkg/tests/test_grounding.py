import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patchlens.grounding import (
    DEFAULT_VOCAB,
    OBJECT_WORDS,
    BBox,
    GroundingSpec,
    bbox_to_patch_set,
    class_histogram,
    detokenize,
    generate_dataset,
    manifest_header,
    patch_count_bound,
    read_manifest,
    tokenize_question,
    write_manifest,
)

G, P = 8, 4
SIDE = G * P


def brute_force_patches(box, g=G, p=P):
    """Enumerate every patch rectangle and keep those with positive-area overlap."""
    out = set()
    for r in range(g):
        for c in range(g):
            ix = min(box.x1, (c + 1) * p) - max(box.x0, c * p)
            iy = min(box.y1, (r + 1) * p) - max(box.y0, r * p)
            if ix > 0 and iy > 0:
                out.add(r * g + c)
    return out


boxes = st.tuples(
    st.integers(0, SIDE - 1), st.integers(0, SIDE - 1), st.integers(1, SIDE), st.integers(1, SIDE)
).filter(lambda t: t[0] < t[2] and t[1] < t[3]).map(lambda t: BBox(*t))


def test_whole_image_box():
    assert bbox_to_patch_set(BBox(0, 0, SIDE, SIDE), G, P) == frozenset(range(G * G))


def test_box_inside_first_patch():
    assert bbox_to_patch_set(BBox(1, 1, 3, 4), G, P) == {0}


def test_box_spanning_patches():
    assert bbox_to_patch_set(BBox(0, 0, 9, 5), G, P) == {0, 1, 2, 8, 9, 10}
    assert brute_force_patches(BBox(0, 0, 9, 5)) == {0, 1, 2, 8, 9, 10}


@pytest.mark.parametrize("box", [BBox(3, 3, 3, 5), BBox(4, 2, 2, 6)])
def test_degenerate_box_rejected(box):
    with pytest.raises(ValueError):
        bbox_to_patch_set(box, G, P)


@given(boxes)
def test_patch_set_matches_enumeration(box):
    assert bbox_to_patch_set(box, G, P) == brute_force_patches(box)


@given(boxes, st.integers(0, 4), st.integers(0, 4))
def test_patch_set_is_monotone(box, dx, dy):
    bigger = BBox(max(0, box.x0 - dx), max(0, box.y0 - dy), min(SIDE, box.x1 + dx), min(SIDE, box.y1 + dy))
    assert bbox_to_patch_set(box, G, P) <= bbox_to_patch_set(bigger, G, P)


@given(boxes)
def test_patch_set_size_bound(box):
    assert len(bbox_to_patch_set(box, G, P)) <= patch_count_bound(box, P)


def test_tokenize_question_template():
    v = DEFAULT_VOCAB
    assert tokenize_question("cat") == [v.id("is"), v.id("there"), v.id("a"), v.id("cat"), v.id("?")]
    a, b = tokenize_question("cat"), tokenize_question("dog")
    assert sum(x != y for x, y in zip(a, b)) == 1
    assert "cake" in detokenize(tokenize_question("cake")).split()
    with pytest.raises(KeyError, match="vocabulary"):
        tokenize_question("zebra")


def test_grounding_spec_absent_object_has_no_positives():
    spec = GroundingSpec.from_bbox([7], None, G, P)
    assert spec.positives == frozenset()
    assert spec.negatives == frozenset(range(G * G))
    with pytest.raises(ValueError):
        GroundingSpec((7,), G * G, frozenset({1}), None)
    with pytest.raises(ValueError):
        GroundingSpec((), G * G)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(512, G, P, seed=11)


def test_dataset_structure(dataset):
    by_image = {}
    for ex in dataset:
        by_image.setdefault(ex.image_id, []).append(ex)
    assert len(by_image) == 512
    for exs in by_image.values():
        objects = exs[0].objects
        assert 1 <= len(objects) <= 3
        assert len({w for w, _ in objects}) == len(objects)
        for i, (_, a) in enumerate(objects):
            a.validate(SIDE)
            for _, b in objects[i + 1 :]:
                assert not a.overlaps(b)
        yes = [e for e in exs if e.answer == [DEFAULT_VOCAB.yes]]
        no = [e for e in exs if e.answer == [DEFAULT_VOCAB.no]]
        assert len(yes) == len(objects) and len(no) == 1


def test_answers_consistent_with_objects(dataset):
    for ex in dataset:
        present = ex.concept in {w for w, _ in ex.objects}
        assert (ex.answer == [DEFAULT_VOCAB.yes]) == present
        assert ex.question == tokenize_question(ex.concept)
        if present:
            assert ex.grounding().positives
        else:
            assert not ex.grounding().positives


def test_images_in_range_with_textured_background(dataset):
    img = dataset[0].image
    assert img.shape == (SIDE, SIDE, 3)
    assert img.min() >= 0 and img.max() <= 1
    mask = np.ones((SIDE, SIDE), dtype=bool)
    for _, b in dataset[0].objects:
        mask[b.y0 : b.y1, b.x0 : b.x1] = False
    background = img[mask]
    assert background.max() <= 0.1 and background.std() > 0.01


def test_class_balance(dataset):
    # independent recount: each image's distinct object words
    seen = {}
    for ex in dataset:
        seen[ex.image_id] = {w for w, _ in ex.objects}
    counts = Counter(w for ws in seen.values() for w in ws)
    assert len(OBJECT_WORDS) >= 8
    for w in OBJECT_WORDS:
        assert counts[w] / 512 >= 0.03
    assert class_histogram(dataset) == {w: counts[w] for w in OBJECT_WORDS}


def test_generation_errors():
    with pytest.raises(ValueError):
        generate_dataset(0)
    with pytest.raises(ValueError):
        generate_dataset(1, grid_side=1, patch_px=2)


def test_manifest_round_trip_is_byte_identical(tmp_path):
    exs = generate_dataset(6, G, P, seed=5)
    header = manifest_header(G, P, seed=5)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_manifest(a, exs, header)
    write_manifest(b, generate_dataset(6, G, P, seed=5), header)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()

    head, back = read_manifest(a)
    assert head["vocab"] == list(DEFAULT_VOCAB.words)
    assert len(back) == len(exs)
    for x, y in zip(exs, back):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.objects == y.objects and x.question == y.question and x.answer == y.answer

    c = tmp_path / "c.jsonl"
    write_manifest(c, back, head)
    assert c.read_bytes() == a.read_bytes()
