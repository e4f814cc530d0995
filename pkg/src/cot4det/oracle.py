"""Exact-arithmetic reference implementation of average precision.

Used only to cross-check :mod:`cot4det.metrics`. It shares no code with
that module: boxes become :class:`fractions.Fraction` tuples, matching is
re-simulated from scratch, and the interpolated envelope is evaluated by
taking the maximum over every later operating point at each recall level.
"""

from __future__ import annotations

from fractions import Fraction

from .errors import TooLarge

__all__ = ["brute_force_ap_oracle", "MAX_ITEMS"]

MAX_ITEMS = 8


def _coords(box):
    if hasattr(box, "x1"):
        box = (box.x1, box.y1, box.x2, box.y2)
    return tuple(Fraction(v) for v in box)


def _pred(p, k):
    """-> (image, label, box, score, emission index)"""
    if hasattr(p, "box"):
        return (getattr(p, "image_id", 0), p.label, _coords(p.box), Fraction(p.score), k)
    if len(p) == 4:
        image, label, box, score = p
    else:
        (label, box, score), image = p, 0
    return (image, label, _coords(box), Fraction(score), k)


def _gt(g):
    if len(g) == 3:
        image, label, box = g
    else:
        (label, box), image = g, 0
    return (image, label, _coords(box))


def _overlap(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return Fraction(0)
    inter = w * h
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def brute_force_ap_oracle(preds, gts, iou_thresh):
    """Mean AP over categories with ground truth, or ``None`` if there are none.

    ``preds`` items are detection-like objects (``box``, ``label``,
    ``score``) or tuples ``(label, box, score)`` / ``(image, label, box,
    score)``; ``gts`` items are ``(label, box)`` or ``(image, label, box)``.
    At most 8 of each.
    """
    if len(preds) > MAX_ITEMS or len(gts) > MAX_ITEMS:
        raise TooLarge(f"oracle handles at most {MAX_ITEMS} predictions and ground truths")
    thresh = Fraction(str(iou_thresh))
    P = [_pred(p, k) for k, p in enumerate(preds)]
    G = [_gt(g) for g in gts]
    # rank: score descending, then image, then emission order
    P.sort(key=lambda p: (-p[3], p[0], p[4]))

    labels = sorted({g[1] for g in G})
    if not labels:
        return None
    total = Fraction(0)
    for label in labels:
        used = set()
        outcome = []
        for image, plabel, box, _, _ in P:
            if plabel != label:
                continue
            best, best_v = None, None
            for gi, (gimage, glabel, gbox) in enumerate(G):
                if gimage != image or glabel != label or gi in used:
                    continue
                v = _overlap(box, gbox)
                if best_v is None or v > best_v:
                    best, best_v = gi, v
            if best is not None and best_v >= thresh:
                used.add(best)
                outcome.append(True)
            else:
                outcome.append(False)
        n_pos = sum(1 for g in G if g[1] == label)
        points = []
        hits = 0
        for k, hit in enumerate(outcome, 1):
            hits += hit
            points.append((Fraction(hits, n_pos), Fraction(hits, k)))
        area = Fraction(0)
        for r in range(101):
            level = Fraction(r, 100)
            reachable = [prec for rec, prec in points if rec >= level]
            area += max(reachable) if reachable else 0
        total += area / 101
    return float(total / len(labels))
