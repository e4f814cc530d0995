import json

import numpy as np
import pytest

from cot4det.datasets import Category, CategoryVocab, ImageAnnotation, Instance, RefExpression
from cot4det.geometry import BBox, iou
from cot4det.metrics import (
    EvalReport,
    PRCounts,
    average_precision,
    coco_map,
    evaluate_detections,
    format_detection_table,
    format_rec_table,
    interpolated_ap,
    lvis_breakdown,
    match_greedy,
    precision_recall,
    rec_accuracy,
)
from cot4det.parser import Detection

from conftest import make_corpus

HALF_GT = BBox(0, 0, 4, 2)
HALF_PRED = BBox(0, 0, 4, 1)  # IoU exactly 0.5


def test_half_iou_is_exact():
    assert iou(HALF_PRED, HALF_GT) == 0.5


def test_detection_threshold_inclusive():
    pr = precision_recall([Detection(HALF_PRED, "a")], [("a", HALF_GT)], 0.5)
    assert (pr.tp, pr.fp, pr.fn) == (1, 0, 0)


def test_rec_threshold_strict():
    ref = RefExpression(1, "a", HALF_GT, "phrase")
    assert rec_accuracy([HALF_PRED], [ref]) == 0.0
    assert rec_accuracy([[Detection(HALF_GT, "a")]], [ref]) == 1.0
    assert rec_accuracy([None], [ref]) == 0.0


def test_rec_uses_top_scoring_box():
    ref = RefExpression(1, "a", BBox(0, 0, 10, 10), "phrase")
    dets = [Detection(BBox(50, 50, 60, 60), "a", 0.4), Detection(BBox(0, 0, 10, 10), "a", 0.9)]
    assert rec_accuracy([dets], [ref]) == 1.0


def test_greedy_matching_follows_score():
    gts = [("a", BBox(0, 0, 10, 10))]
    preds = [Detection(BBox(0, 0, 10, 9), "a", 0.3), Detection(BBox(0, 0, 10, 10), "a", 0.2)]
    m = match_greedy(preds, gts)
    assert m.pairs[0][0] == 0 and m.unmatched_preds == (1,)


def test_labels_must_agree():
    pr = precision_recall([Detection(BBox(0, 0, 1, 1), "b")], [("a", BBox(0, 0, 1, 1))])
    assert (pr.tp, pr.fp, pr.fn) == (0, 1, 1)


def test_degenerate_precision():
    pr = PRCounts(0, 0, 3)
    assert pr.precision == 1.0 and pr.degenerate and pr.recall == 0.0
    assert PRCounts().recall == 1.0 and not PRCounts().degenerate
    assert PRCounts(1, 2, 3) + PRCounts(1, 0, 0) == PRCounts(2, 2, 3)


@pytest.mark.parametrize(
    "flags, n_gt, expected",
    [
        ([True], 1, 1.0),
        ([False, True], 1, 0.5),
        ([True, False], 2, 51 / 101),
        ([], 3, 0.0),
        ([True, True, True, True, True], 5, 1.0),
    ],
)
def test_interpolated_ap(flags, n_gt, expected):
    assert interpolated_ap(flags, n_gt) == pytest.approx(expected, abs=1e-12)


def test_interpolated_ap_needs_gt():
    with pytest.raises(ValueError):
        interpolated_ap([True], 0)


def test_average_precision_none_without_gt():
    assert average_precision([Detection(BBox(0, 0, 1, 1), "a")], []) is None


def _perfect(anns, vocab):
    return {a.image_id: [Detection(i.box, vocab.name_of(i.category_id)) for i in a.instances] for a in anns}


def test_perfect_predictions_score_one():
    vocab, anns = make_corpus(30, 6, seed=2)
    res = coco_map(_perfect(anns, vocab), anns, vocab)
    assert res.map == 1.0
    assert res.ap_small in (None, 1.0)
    rep = evaluate_detections(_perfect(anns, vocab), anns, vocab)
    assert rep.precision == rep.recall == 1.0


def test_map_ignores_image_order():
    vocab, anns = make_corpus(15, 4, seed=5)
    rng = np.random.default_rng(0)
    dets = {
        a.image_id: [Detection(i.box.translate(float(rng.uniform(0, 4)), 0) if i.box.x2 + 4 <= a.width else i.box, vocab.name_of(i.category_id), 0.5) for i in a.instances]
        for a in anns
    }
    fwd = coco_map(dets, anns, vocab)
    rev = coco_map(dets, list(reversed(anns)), vocab)
    assert fwd == rev


def test_small_objects_protocol():
    vocab = CategoryVocab((Category(1, "a"),))
    small, big = BBox(0, 0, 10, 10), BBox(100, 100, 200, 200)
    ann = ImageAnnotation(1, 300, 300, (Instance(1, small), Instance(1, big)))
    # a false positive that is large is ignored for AP_small
    dets = {1: [Detection(BBox(250, 0, 300, 60), "a", 0.9), Detection(small, "a", 0.8)]}
    res = coco_map(dets, [ann], vocab)
    assert res.ap_small == 1.0
    assert res.map < 1.0


def test_vocab_mismatch_counted():
    vocab = CategoryVocab((Category(1, "a"),))
    ann = ImageAnnotation(1, 10, 10, (Instance(1, BBox(0, 0, 5, 5)),))
    res = coco_map({1: [Detection(BBox(0, 0, 5, 5), "zebra")]}, [ann], vocab)
    assert res.vocab_mismatch == 1 and res.map == 0.0


def test_lvis_breakdown():
    vocab = CategoryVocab((Category(1, "a", "rare"), Category(2, "b", "frequent"), Category(3, "c", "frequent")))
    assert lvis_breakdown({"a": 0.2, "b": 0.4, "c": 0.8}, vocab) == (0.2, None, pytest.approx(0.6))


def test_report_round_trip_and_table():
    vocab, anns = make_corpus(5, 3, seed=1)
    rep = evaluate_detections(_perfect(anns, vocab), anns, vocab, setting="full_category")
    again = EvalReport.from_dict(json.loads(rep.to_json()))
    assert again == rep
    table = format_detection_table([("run", rep)])
    assert table.splitlines()[0].split() == ["Run", "P@0.5", "R@0.5", "mAP"]
    assert table.splitlines()[1].split() == ["run", "100.0", "100.0", "100.0"]
    assert format_rec_table([("REC", 0.875)]).splitlines()[1].split() == ["REC", "87.5"]


def test_report_rejects_out_of_range():
    with pytest.raises(ValueError):
        EvalReport("x", 1.2, 0, None, None, None, None, None, 0, 0, 0, False, {}, 0)
