"""Detection, grounding and referring-expression metrics.

Conventions
-----------
* Matching is greedy in score order, one-to-one, same category only.
  Detection matching accepts IoU >= threshold; referring-expression
  accuracy requires IoU strictly greater than 0.5.
* Corpus precision/recall are micro-averaged: TP/FP/FN are summed over
  images before dividing.
* AP uses the COCO 101-point interpolated precision envelope; mAP averages
  over IoU thresholds 0.50:0.05:0.95 and over categories with ground truth.
* Ranking ties across images are broken by image id, then emission order,
  so results do not depend on the order images are supplied in.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .datasets import CategoryVocab, ImageAnnotation
from .geometry import SMALL_AREA, BBox, area, iou
from .parser import Detection

__all__ = [
    "COCO_IOU_THRESHOLDS",
    "RECALL_POINTS",
    "Matching",
    "PRCounts",
    "MapResult",
    "EvalReport",
    "match_greedy",
    "precision_recall",
    "average_precision",
    "interpolated_ap",
    "coco_map",
    "lvis_breakdown",
    "rec_accuracy",
    "evaluate_detections",
    "format_detection_table",
    "format_rec_table",
]

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# k/100 computed by exact division so that recall values such as 1/5 land on the grid.
RECALL_POINTS = np.arange(101) / 100.0
REC_IOU = 0.5


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_preds: tuple[int, ...]
    unmatched_gts: tuple[int, ...]


@dataclass(frozen=True)
class PRCounts:
    """TP/FP/FN tallies; ``+`` is the associative reduction used across images."""

    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: PRCounts) -> PRCounts:
        return PRCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def degenerate(self) -> bool:
        """No predictions but ground truth exists; precision is reported as 1.0."""
        return self.tp + self.fp == 0 and self.fn > 0

    @property
    def precision(self) -> float:
        n = self.tp + self.fp
        return 1.0 if n == 0 else self.tp / n

    @property
    def recall(self) -> float:
        n = self.tp + self.fn
        return 1.0 if n == 0 else self.tp / n


def _score_order(preds: Sequence[Detection]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def match_greedy(preds: Sequence[Detection], gts: Sequence[tuple[str, BBox]], iou_thresh: float = 0.5) -> Matching:
    """One-to-one greedy matching of predictions to same-category ground truth.

    Predictions are visited in descending score (stable on input order);
    each takes the unmatched ground truth of its category with the highest
    IoU, lowest index on ties, if that IoU reaches ``iou_thresh``.
    """
    taken = [False] * len(gts)
    pairs = []
    unmatched = []
    for pi in _score_order(preds):
        p = preds[pi]
        best, best_iou = -1, -1.0
        for gi, (label, box) in enumerate(gts):
            if taken[gi] or label != p.label:
                continue
            v = iou(p.box, box)
            if v > best_iou:
                best, best_iou = gi, v
        if best >= 0 and best_iou >= iou_thresh:
            taken[best] = True
            pairs.append((pi, best, best_iou))
        else:
            unmatched.append(pi)
    return Matching(
        tuple(pairs),
        tuple(sorted(unmatched)),
        tuple(i for i, t in enumerate(taken) if not t),
    )


def precision_recall(preds, gts, iou_thresh: float = 0.5) -> PRCounts:
    """TP/FP/FN at one IoU threshold; read ``.precision`` / ``.recall`` off the result."""
    m = match_greedy(preds, gts, iou_thresh)
    return PRCounts(len(m.pairs), len(m.unmatched_preds), len(m.unmatched_gts))


def interpolated_ap(tp_flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP of a ranked TP/FP sequence against ``n_gt`` positives."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    flags = np.asarray(tp_flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(preds: Sequence[Detection], gts: Sequence[tuple[str, BBox]], iou_thresh: float = 0.5):
    """Single-image AP averaged over the categories that have ground truth.

    Returns ``None`` when no category has ground truth.
    """
    m = match_greedy(preds, gts, iou_thresh)
    matched = {pi for pi, _, _ in m.pairs}
    n_gt: dict[str, int] = {}
    for label, _ in gts:
        n_gt[label] = n_gt.get(label, 0) + 1
    if not n_gt:
        return None
    order = _score_order(preds)
    aps = []
    for label in sorted(n_gt):
        flags = [pi in matched for pi in order if preds[pi].label == label]
        aps.append(interpolated_ap(flags, n_gt[label]))
    return float(np.mean(aps))


@dataclass
class _Ranked:
    """Per-category accumulator of ranked detections across images."""

    keys: list = field(default_factory=list)
    tp: list = field(default_factory=list)  # per threshold
    ignore: list = field(default_factory=list)
    n_gt: int = 0
    n_gt_small: int = 0
    tp_small: list = field(default_factory=list)
    ignore_small: list = field(default_factory=list)


def _match_image(dets, gts, thresholds, gt_ignore=None, det_outside=None):
    """Greedy matching of one image/category at several thresholds.

    With ``gt_ignore`` the COCO area-range rule applies: a detection prefers
    a regular ground truth, may fall back to an ignored one (and is then
    ignored), and an unmatched detection outside the range is ignored.
    Returns (tp, ignored) boolean arrays of shape (T, D).
    """
    n_t, n_d, n_g = len(thresholds), len(dets), len(gts)
    tp = np.zeros((n_t, n_d), dtype=bool)
    ign = np.zeros((n_t, n_d), dtype=bool)
    if n_d == 0:
        return tp, ign
    if n_g == 0:
        if det_outside is not None:
            ign[:] = det_outside[None, :]
        return tp, ign
    ious = np.array([[iou(d.box, g) for g in gts] for d in dets])
    g_ign = np.zeros(n_g, dtype=bool) if gt_ignore is None else gt_ignore
    for t, thr in enumerate(thresholds):
        taken = np.zeros(n_g, dtype=bool)
        for d in range(n_d):
            hit = -1
            for pool in (~g_ign, g_ign):
                cand = np.flatnonzero(pool & ~taken)
                if cand.size == 0:
                    continue
                vals = ious[d, cand]
                j = int(np.argmax(vals))  # first max -> lowest gt index
                if vals[j] >= thr:
                    hit = int(cand[j])
                    break
            if hit >= 0:
                taken[hit] = True
                tp[t, d] = not g_ign[hit]
                ign[t, d] = g_ign[hit]
            elif det_outside is not None:
                ign[t, d] = det_outside[d]
    return tp, ign


@dataclass(frozen=True)
class MapResult:
    map: float | None
    ap_small: float | None
    per_category: dict
    per_category_small: dict
    per_category_ap50: dict
    vocab_mismatch: int = 0


def _ap_from_ranked(acc: _Ranked, t: int, small: bool) -> float:
    order = sorted(range(len(acc.keys)), key=lambda i: acc.keys[i])
    tp = acc.tp_small if small else acc.tp
    ign = acc.ignore_small if small else acc.ignore
    flags = [tp[i][t] for i in order if not ign[i][t]]
    return interpolated_ap(flags, acc.n_gt_small if small else acc.n_gt)


def coco_map(
    detections: Mapping[int, Sequence[Detection]],
    annotations: Sequence[ImageAnnotation],
    vocab: CategoryVocab,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    small_area: float = SMALL_AREA,
) -> MapResult:
    """COCO-style mAP and AP_small over a corpus.

    ``detections`` maps image id to that image's detections. Labels absent
    from ``vocab`` are counted in ``vocab_mismatch``; they can only be false
    positives and never enter a category mean.
    """
    thresholds = list(iou_thresholds)
    accs: dict[str, _Ranked] = {name: _Ranked() for name in vocab.names}
    mismatch = 0
    for ann in sorted(annotations, key=lambda a: a.image_id):
        dets = list(detections.get(ann.image_id, ()))
        gts_by: dict[str, list[BBox]] = {}
        for inst in ann.instances:
            gts_by.setdefault(vocab.name_of(inst.category_id), []).append(inst.box)
        dets_by: dict[str, list[tuple[int, Detection]]] = {}
        for k, d in enumerate(dets):
            if d.label not in accs:
                mismatch += 1
                continue
            dets_by.setdefault(d.label, []).append((k, d))
        for label in set(gts_by) | set(dets_by):
            acc = accs[label]
            g = gts_by.get(label, [])
            ranked = sorted(dets_by.get(label, []), key=lambda kd: (-kd[1].score, kd[0]))
            ds = [d for _, d in ranked]
            tp, ign = _match_image(ds, g, thresholds)
            g_small_ign = np.array([area(b) >= small_area for b in g], dtype=bool)
            d_outside = np.array([area(d.box) >= small_area for d in ds], dtype=bool)
            tp_s, ign_s = _match_image(ds, g, thresholds, g_small_ign, d_outside)
            acc.n_gt += len(g)
            acc.n_gt_small += int((~g_small_ign).sum())
            for r, (k, d) in enumerate(ranked):
                acc.keys.append((-d.score, ann.image_id, k))
                acc.tp.append(tp[:, r])
                acc.ignore.append(ign[:, r])
                acc.tp_small.append(tp_s[:, r])
                acc.ignore_small.append(ign_s[:, r])

    per_cat, per_cat_small, per_cat_50 = {}, {}, {}
    for name, acc in accs.items():
        if acc.n_gt > 0:
            aps = [_ap_from_ranked(acc, t, False) for t in range(len(thresholds))]
            per_cat[name] = float(np.mean(aps))
            per_cat_50[name] = aps[0]
        if acc.n_gt_small > 0:
            per_cat_small[name] = float(np.mean([_ap_from_ranked(acc, t, True) for t in range(len(thresholds))]))
    return MapResult(
        map=float(np.mean(list(per_cat.values()))) if per_cat else None,
        ap_small=float(np.mean(list(per_cat_small.values()))) if per_cat_small else None,
        per_category=per_cat,
        per_category_small=per_cat_small,
        per_category_ap50=per_cat_50,
        vocab_mismatch=mismatch,
    )


def lvis_breakdown(per_category_ap: Mapping[str, float], vocab: CategoryVocab):
    """Mean AP within the rare, common and frequent bands; ``None`` for empty bands."""
    bands: dict[str, list[float]] = {"rare": [], "common": [], "frequent": []}
    for name, ap in per_category_ap.items():
        cat = vocab.by_name(name)
        if cat is not None and cat.band in bands:
            bands[cat.band].append(ap)
    return tuple(float(np.mean(v)) if v else None for v in (bands["rare"], bands["common"], bands["frequent"]))


def rec_accuracy(predictions: Sequence, expressions: Sequence) -> float:
    """Fraction of expressions whose retained box has IoU > 0.5 with the target.

    ``predictions[i]`` may be ``None``, a :class:`BBox`, or a sequence of
    detections of which the highest-scoring (first on ties) is retained.
    """
    if len(predictions) != len(expressions):
        raise ValueError("predictions and expressions must align")
    if not expressions:
        return 0.0
    correct = 0
    for pred, ref in zip(predictions, expressions):
        if pred is None:
            continue
        if isinstance(pred, BBox):
            box = pred
        else:
            pred = list(pred)
            if not pred:
                continue
            box = pred[_score_order(pred)[0]].box
        if iou(box, ref.target) > REC_IOU:
            correct += 1
    return correct / len(expressions)


@dataclass
class EvalReport:
    setting: str
    precision: float
    recall: float
    map: float | None
    ap_small: float | None
    ap_r: float | None
    ap_c: float | None
    ap_f: float | None
    tp: int
    fp: int
    fn: int
    degenerate_precision: bool
    per_category_ap: dict
    n_images: int
    vocab_mismatch: int = 0
    n_failed: int = 0
    rec_accuracy: float | None = None
    n_expressions: int = 0

    def __post_init__(self):
        for name in ("precision", "recall", "map", "ap_small", "ap_r", "ap_c", "ap_f", "rec_accuracy"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category_ap"] = dict(sorted(self.per_category_ap.items()))
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(**d)


def evaluate_detections(
    detections: Mapping[int, Sequence[Detection]],
    annotations: Sequence[ImageAnnotation],
    vocab: CategoryVocab,
    setting: str = "",
    iou_thresh: float = 0.5,
    n_failed: int = 0,
) -> EvalReport:
    """Full detection report: P/R at ``iou_thresh``, mAP, AP_small and LVIS bands."""
    counts = PRCounts()
    for ann in annotations:
        gts = [(vocab.name_of(i.category_id), i.box) for i in ann.instances]
        counts = counts + precision_recall(detections.get(ann.image_id, ()), gts, iou_thresh)
    res = coco_map(detections, annotations, vocab)
    ap_r, ap_c, ap_f = lvis_breakdown(res.per_category, vocab)
    return EvalReport(
        setting=setting,
        precision=counts.precision,
        recall=counts.recall,
        map=res.map,
        ap_small=res.ap_small,
        ap_r=ap_r,
        ap_c=ap_c,
        ap_f=ap_f,
        tp=counts.tp,
        fp=counts.fp,
        fn=counts.fn,
        degenerate_precision=counts.degenerate,
        per_category_ap=res.per_category,
        n_images=len(annotations),
        vocab_mismatch=res.vocab_mismatch,
        n_failed=n_failed,
    )


def _pct(v) -> str:
    return "-" if v is None else f"{100.0 * v:.1f}"


def format_detection_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Aligned text table; columns follow P@0.5, R@0.5, mAP[, AP-R, AP-C, AP-F]."""
    banded = any(r.ap_r is not None or r.ap_c is not None or r.ap_f is not None for _, r in rows)
    header = ["Run", "P@0.5", "R@0.5", "mAP"] + (["AP-R", "AP-C", "AP-F"] if banded else [])
    body = []
    for name, r in rows:
        cells = [name, _pct(r.precision), _pct(r.recall), _pct(r.map)]
        if banded:
            cells += [_pct(r.ap_r), _pct(r.ap_c), _pct(r.ap_f)]
        body.append(cells)
    return _align([header] + body)


def format_rec_table(rows: Sequence[tuple[str, float]]) -> str:
    return _align([["Run", "Acc@0.5"]] + [[name, _pct(acc)] for name, acc in rows])


def _align(table: list[list[str]]) -> str:
    widths = [max(len(row[c]) for row in table) for c in range(len(table[0]))]
    lines = []
    for row in table:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"
