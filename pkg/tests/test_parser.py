import numpy as np
import pytest

from cot4det.errors import NoParsableContent
from cot4det.geometry import BBox
from cot4det.parser import decode, detection_record, parse_cot_answer, parse_or_empty, to_detections, validate
from cot4det.prompts import PromptSpec, render_stages

from conftest import PAPER_LISTING, PAPER_LISTING_VERBATIM


def spec_of(*names, negatives=()):
    return PromptSpec(0, tuple(names) + tuple(negatives), frozenset(names), frozenset(negatives), "full_category")


def test_listing_parses():
    ans = parse_cot_answer(PAPER_LISTING)
    assert ans.classification == ("class_1", "class_2")
    assert ans.declared == {"class_1": 3, "class_2": 1}
    assert ans.labels == ["class_1"] * 3 + ["class_2"]
    assert ans.boxes[0][0] == BBox(12, 40, 96, 210)
    assert not ans.warnings


def test_placeholder_listing_keeps_first_two_stages():
    ans = parse_cot_answer(PAPER_LISTING_VERBATIM)
    assert ans.classification == ("class_1", "class_2")
    assert ans.declared == {"class_1": 3, "class_2": 1}
    assert ans.boxes == ()
    assert sum("not valid JSON" in w for w in ans.warnings) == 4


def test_fences_prose_and_header_case():
    text = "Sure! Here you go.\n```text\n**category classification:**\nDog\n\nCATEGORY COUNTING:\ndog: 1\n\ngrounding boxes:\n```json\n[{\"bbox_2d\": [1, 2, 30, 40], \"label\": \"Dog\"}]\n```\nHope that helps."
    ans = parse_cot_answer(text)
    assert ans.classification == ("dog",)
    assert ans.declared == {"dog": 1}
    assert ans.boxes == ((BBox(1, 2, 30, 40), "dog"),)


def test_truncated_list_keeps_complete_records():
    text = PAPER_LISTING[: PAPER_LISTING.index('{"bbox_2d": [400') + 20]
    ans = parse_cot_answer(text)
    assert len(ans.boxes) == 3
    assert any("unterminated" in w for w in ans.warnings)


def test_bare_record_list_infers_stages():
    ans = parse_cot_answer('[{"bbox_2d": [0, 0, 5, 5], "label": "cat"}, {"bbox_2d": [6, 0, 9, 5], "label": "cat"}]')
    assert ans.missing_stages == {"classification", "counting", "grounding"}
    assert ans.classification == ("cat",)
    assert ans.declared == {"cat": 2}


def test_bare_empty_list_is_an_answer():
    ans = parse_cot_answer("[]")
    assert ans.boxes == ()


def test_refusal_raises_but_parse_or_empty_does_not():
    with pytest.raises(NoParsableContent):
        parse_cot_answer("I'm sorry, I can't help with that.")
    ans = parse_or_empty("I'm sorry, I can't help with that.")
    assert ans.boxes == () and ans.warnings


@pytest.mark.parametrize(
    "record, fragment",
    [
        ('{"bbox_2d": [0, 0, 5], "label": "a"}', "4 finite numbers"),
        ('{"bbox_2d": [5, 0, 1, 5], "label": "a"}', "degenerate"),
        ('{"bbox_2d": [0, 0, 5, 5]}', "missing label"),
        ('{"bbox_2d": [0, 0, true, 5], "label": "a"}', "4 finite numbers"),
    ],
)
def test_bad_records_become_warnings(record, fragment):
    ans = parse_cot_answer(f"Category Classification:\na\n\nCategory Counting:\na: 1\n\nGrounding Boxes:\n[{record}]")
    assert ans.boxes == ()
    assert any(fragment in w for w in ans.warnings)


def test_validate_flags_each_inconsistency():
    spec = spec_of("a", "b")
    boxes = [("a", BBox(0, 0, 10, 10)), ("a", BBox(0, 0, 10, 10)), ("c", BBox(50, 50, 60, 60)), ("a", BBox(95, 0, 101, 10))]
    text = render_stages(["a"], [("a", 2), ("b", 0)], boxes)
    ans = parse_cot_answer(text)
    rep = validate(ans, spec, 100, 100)
    assert not rep.ok
    assert rep.classification_counts_agree
    assert not rep.counts_boxes_agree
    assert rep.count_deltas == {"a": -1, "b": 0, "c": -1}
    assert not rep.labels_subset_of_prompt
    assert not rep.ordering_canonical
    assert not rep.boxes_within_image
    assert rep.duplicate_groups == ((0, 1),)


def test_repair_policy_order():
    spec = spec_of("a", "b")
    boxes = [
        ("a", BBox(0, 0, 10, 10)),
        ("a", BBox(0, 0, 10, 10.2)),  # duplicate of the first
        ("a", BBox(20, 0, 30, 10)),
        ("a", BBox(40, 0, 50, 10)),  # beyond declared count
        ("b", BBox(0, 50, 10, 60)),  # label not classified
        ("a", BBox(90, 0, 100.5, 10)),  # over budget too
    ]
    ans = parse_cot_answer(render_stages(["a"], [("a", 2)], boxes))
    rep = validate(ans, spec, 100, 100)
    dets = to_detections(ans, rep, "repair")
    assert [d.box for d in dets] == [BBox(0, 0, 10, 10), BBox(20, 0, 30, 10)]
    assert [d.score for d in dets] == pytest.approx([1.0, 2 / 3])
    assert to_detections(ans, rep, "strict") == []
    assert len(to_detections(ans, rep, "lenient")) == 6


def test_repair_clamps_subpixel_overshoot_and_drops_larger():
    spec = spec_of("a")
    boxes = [("a", BBox(0, 0, 10, 100.4)), ("a", BBox(50, 0, 60, 103))]
    ans = parse_cot_answer(render_stages(["a"], [("a", 2)], boxes))
    dets = to_detections(ans, validate(ans, spec, 100, 100), "repair")
    assert [d.box for d in dets] == [BBox(0, 0, 10, 100)]


def test_missing_count_means_zero_under_repair():
    spec = spec_of("a")
    text = "Category Classification:\na\n\nCategory Counting:\n\nGrounding Boxes:\n" + '[{"bbox_2d": [0,0,5,5], "label": "a"}]'
    _, _, dets = decode(text, spec, 10, 10)
    assert dets == []


def test_unknown_policy_rejected():
    ans = parse_cot_answer("[]")
    with pytest.raises(ValueError):
        to_detections(ans, validate(ans, spec_of("a"), None, None), "greedy")


def test_detection_record_shape():
    ans, rep, dets = decode(PAPER_LISTING, spec_of("class_1", "class_2"), 640, 480)
    rec = detection_record(7, dets, rep, ans.warnings)
    assert rec["image_id"] == 7
    assert rec["detections"][0] == {"bbox": [12.0, 40.0, 96.0, 210.0], "label": "class_1", "score": 1.0}
    assert rec["consistency"]["counts_boxes_agree"] is True


ALPHABET = list('{}[]":,;\n ') + ["Category Classification:", "Category Counting:", "Grounding Boxes:", '"bbox_2d"', '"label"', "1", "-3", "1e999", "a", "```", "\\"]


def test_parser_never_crashes_on_fuzz():
    rng = np.random.default_rng(7)
    spec = spec_of("a", negatives=("b",))
    base = PAPER_LISTING
    for _ in range(20_000):
        if rng.random() < 0.5:
            text = "".join(rng.choice(ALPHABET, size=int(rng.integers(0, 40))))
        else:
            chars = list(base)
            for _ in range(int(rng.integers(1, 8))):
                pos = int(rng.integers(0, len(chars)))
                op = rng.integers(0, 3)
                if op == 0:
                    del chars[pos]
                elif op == 1:
                    chars.insert(pos, str(rng.choice(ALPHABET)))
                else:
                    chars[pos] = str(rng.choice(ALPHABET))
            text = "".join(chars)
        ans, rep, _ = decode(text, spec, 640, 480)
        for policy in ("lenient", "strict", "repair"):
            to_detections(ans, rep, policy)
