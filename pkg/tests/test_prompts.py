import math
from collections import Counter

import pytest

from cot4det.datasets import ImageAnnotation, Instance
from cot4det.errors import EmptyCategoryList, EmptyImage, UnknownTag, WeightSumMismatch
from cot4det.geometry import BBox
from cot4det.prompts import (
    TABLE1_REMAINDER_TAG,
    TABLE1_SAMPLE_WEIGHTS,
    MixtureSpec,
    PromptSpec,
    build_mixture,
    build_record,
    format_coord,
    full_category_spec,
    ground_truth_spec,
    refexp_spec,
    render_cot_answer,
    render_prompt,
    sample_categories,
    table1_mixture,
)
from cot4det.datasets import RefExpression


def test_prompt_template():
    spec = PromptSpec(1, ("dog", "cat"), {"dog"}, {"cat"})
    assert render_prompt(spec) == "<image>\n Locate every dog, cat in the image."
    with pytest.raises(EmptyCategoryList):
        render_prompt(PromptSpec(1, ()))


@pytest.mark.parametrize("v, s", [(3.0, "3"), (3.5, "3.5"), (0.125, "0.12"), (2.999, "3"), (10.1, "10.1")])
def test_format_coord(v, s):
    assert format_coord(v) == s


def test_spec_partition_enforced():
    with pytest.raises(ValueError):
        PromptSpec(1, ("a", "b"), {"a"}, set())
    with pytest.raises(ValueError):
        PromptSpec(1, ("a", "a"), {"a"}, set())
    with pytest.raises(ValueError):
        PromptSpec(1, ("a", "b"), {"a"}, {"b"}, setting="ground_truth_categories")


def test_sample_categories(corpus):
    vocab, anns = corpus
    ann = next(a for a in anns if len(set(a.category_ids)) >= 2)
    spec = sample_categories(ann, vocab, neg_ratio=1.0, seed=3)
    assert len(spec.negatives) == len(spec.positives)
    assert spec.positives == {vocab.name_of(c) for c in ann.category_ids}
    assert sample_categories(ann, vocab, neg_ratio=1.0, seed=3) == spec
    capped = sample_categories(ann, vocab, neg_ratio=1.0, max_categories=1, seed=3)
    assert len(capped.categories) == 1


def test_empty_image_sampling(corpus):
    vocab, _ = corpus
    empty = ImageAnnotation(99, 10, 10, ())
    assert len(sample_categories(empty, vocab, neg_ratio=0.3).negatives) == 1
    assert len(sample_categories(empty, vocab, neg_ratio=2.5).negatives) == 3  # half-up
    with pytest.raises(EmptyImage):
        sample_categories(empty, vocab, neg_ratio=0)


def test_eval_specs(corpus):
    vocab, anns = corpus
    ann = next(a for a in anns if a.instances)
    gt = ground_truth_spec(ann, vocab)
    full = full_category_spec(ann, vocab)
    assert not gt.negatives
    assert list(full.categories) == vocab.names
    assert full.positives == gt.positives


def test_answer_is_canonical():
    from cot4det.datasets import CategoryVocab

    vocab = CategoryVocab.from_names(["dog", "cat"])
    ann = ImageAnnotation(1, 100, 100, (Instance(1, BBox(50, 0, 60, 10)), Instance(2, BBox(0, 0, 5, 5)), Instance(1, BBox(10, 0, 20, 10))))
    spec = PromptSpec(1, ("cat", "dog", "bird"), {"cat", "dog"}, {"bird"})
    assert render_cot_answer(ann, spec, vocab) == (
        "Category Classification:\ncat, dog\n\n"
        "Category Counting:\ncat: 1; dog: 2\n\n"
        "Grounding Boxes:\n[\n"
        '  {"bbox_2d": [0, 0, 5, 5], "label": "cat"},\n'
        '  {"bbox_2d": [10, 0, 20, 10], "label": "dog"},\n'
        '  {"bbox_2d": [50, 0, 60, 10], "label": "dog"}\n]'
    )
    rec = build_record(ann, spec, vocab, source="toy", seed=5).to_json()
    assert rec["categories"] == ["cat", "dog", "bird"] and rec["seed"] == 5


def test_refexp_spec_uses_expression_as_category():
    ann, spec, vocab = refexp_spec(RefExpression(4, "the  red car", BBox(1, 1, 9, 9), "phrase", 20, 20))
    assert spec.categories == ("the red car",)
    assert ann.width == 20 and len(vocab) == 1


def test_table1_weights():
    assert math.fsum(TABLE1_SAMPLE_WEIGHTS.values()) == pytest.approx(0.957)
    with pytest.raises(WeightSumMismatch):
        MixtureSpec.from_dict(TABLE1_SAMPLE_WEIGHTS)
    mix = table1_mixture()
    assert mix.as_dict()[TABLE1_REMAINDER_TAG] == pytest.approx(0.043)
    assert all(mix.as_dict()[t] == w for t, w in TABLE1_SAMPLE_WEIGHTS.items())
    scaled = table1_mixture(None).as_dict()
    assert TABLE1_REMAINDER_TAG not in scaled
    assert math.fsum(scaled.values()) == pytest.approx(1.0)


def test_mixture_draws():
    spec = MixtureSpec.from_dict({"a": 0.25, "b": 0.75})
    draws = list(build_mixture([("a", 3), ("b", 5)], spec, 4000, seed=1))
    assert draws == list(build_mixture([("a", 3), ("b", 5)], spec, 4000, seed=1))
    counts = Counter(t for t, _ in draws)
    assert abs(counts["a"] / 4000 - 0.25) < 0.03
    a_idx = [i for t, i in draws if t == "a"]
    assert sorted(a_idx[:3]) == [0, 1, 2]  # one full pass before repeating
    with pytest.raises(UnknownTag):
        list(build_mixture([("a", 3)], spec, 10))
