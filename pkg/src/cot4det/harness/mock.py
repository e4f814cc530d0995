"""Deterministic mock LVLM that injects the usual detection failure modes.

Starting from the ground-truth answer, faults are applied in a fixed
order: small-object drops, coordinate jitter, duplicate re-emission and
boxes for absent (negative) prompt categories. With ``cot=True`` the
classification and counting stages describe the boxes that survived the
drops but not the duplicates or hallucinations, so the counting stage
carries the signal the repair policy relies on.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..datasets import CategoryVocab, ImageAnnotation
from ..geometry import SMALL_AREA, BBox, area
from ..prompts import PromptSpec, render_stages, canonical_boxes, render_grounding

__all__ = ["FaultProfile", "FaultLedger", "mock_generate", "mock_generate_traced"]


@dataclass(frozen=True)
class FaultProfile:
    duplication_rate: float = 0.0
    max_duplicates: int = 1
    hallucination_rate: float = 0.0
    small_miss_rate: float = 0.0
    jitter: float = 0.0
    seed: int = 0
    corrupt_counts: bool = False

    def __post_init__(self):
        for name in ("duplication_rate", "hallucination_rate", "small_miss_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if self.max_duplicates < 1:
            raise ValueError("max_duplicates must be at least 1")

    def miss_probability(self, box_area: float) -> float:
        return self.small_miss_rate if box_area < SMALL_AREA else self.small_miss_rate / 4


@dataclass(frozen=True)
class FaultLedger:
    gt: int
    dropped: int
    duplicates: int
    hallucinations: int
    emitted: int


def _r2(v: float) -> float:
    return round(float(v), 2)


def _jittered(box: BBox, rng, j: float, width: float, height: float) -> BBox:
    d = rng.uniform(-j, j, size=4)
    x1 = _r2(min(max(box.x1 + d[0], 0.0), width))
    y1 = _r2(min(max(box.y1 + d[1], 0.0), height))
    x2 = _r2(min(max(box.x2 + d[2], 0.0), width))
    y2 = _r2(min(max(box.y2 + d[3], 0.0), height))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return box
    return BBox(x1, y1, x2, y2)


def _random_box(rng, width: float, height: float) -> BBox:
    w = _r2(max(1.0, rng.uniform(0.05, 0.5) * width))
    h = _r2(max(1.0, rng.uniform(0.05, 0.5) * height))
    x1 = _r2(rng.uniform(0.0, max(width - w, 0.0)))
    y1 = _r2(rng.uniform(0.0, max(height - h, 0.0)))
    return BBox(x1, y1, min(x1 + w, width), min(y1 + h, height))


def mock_generate_traced(
    ann: ImageAnnotation,
    spec: PromptSpec,
    vocab: CategoryVocab,
    profile: FaultProfile,
    cot: bool = True,
) -> tuple[str, FaultLedger]:
    rng = np.random.default_rng([profile.seed, ann.image_id & 0xFFFFFFFF])
    truth = canonical_boxes(ann, spec, vocab)

    kept = []
    for name, box in truth:
        if rng.random() < profile.miss_probability(area(box)):
            continue
        kept.append((name, box))
    dropped = len(truth) - len(kept)

    if profile.jitter > 0:
        kept = [(name, _jittered(box, rng, profile.jitter, ann.width, ann.height)) for name, box in kept]

    emitted = []
    n_dup = 0
    for name, box in kept:
        emitted.append((name, box))
        if rng.random() < profile.duplication_rate:
            extra = int(rng.integers(1, profile.max_duplicates + 1))
            emitted.extend([(name, box)] * extra)
            n_dup += extra

    n_hall = 0
    for name in spec.categories:
        if name in spec.negatives and rng.random() < profile.hallucination_rate:
            emitted.append((name, _random_box(rng, ann.width, ann.height)))
            n_hall += 1

    position = {name: i for i, name in enumerate(spec.categories)}
    emitted.sort(key=lambda nb: position[nb[0]])

    ledger = FaultLedger(len(truth), dropped, n_dup, n_hall, len(emitted))
    if not cot:
        return render_grounding(emitted), ledger

    tally = Counter(name for name, _ in (emitted if profile.corrupt_counts else kept))
    present = [c for c in spec.categories if tally.get(c)]
    return render_stages(present, [(c, tally[c]) for c in present], emitted), ledger


def mock_generate(ann, spec, vocab, profile, cot=True) -> str:
    """Raw answer text for one image; byte-identical for identical inputs."""
    return mock_generate_traced(ann, spec, vocab, profile, cot)[0]
