"""Question/answer construction and weighted corpus mixing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .datasets import Category, CategoryVocab, ImageAnnotation, Instance, RefExpression, normalize_name
from .errors import EmptyCategoryList, EmptyImage, UnknownTag, WeightSumMismatch
from .geometry import BBox

__all__ = [
    "SETTINGS",
    "GRANULARITIES",
    "PromptSpec",
    "PromptRecord",
    "MixtureSpec",
    "TABLE1_SAMPLE_WEIGHTS",
    "TABLE1_REMAINDER_TAG",
    "table1_mixture",
    "sample_categories",
    "ground_truth_spec",
    "full_category_spec",
    "refexp_spec",
    "render_prompt",
    "render_cot_answer",
    "render_grounding",
    "render_stages",
    "canonical_boxes",
    "format_coord",
    "build_mixture",
    "build_record",
]

SETTINGS = ("ground_truth_categories", "full_category", "sampled")
GRANULARITIES = ("word", "phrase", "sentence")

DEFAULT_NEG_RATIO = 1.0
DEFAULT_MAX_CATEGORIES = 4096

CLASSIFICATION_HEADER = "Category Classification:"
COUNTING_HEADER = "Category Counting:"
GROUNDING_HEADER = "Grounding Boxes:"

# Sample weights of the 13 training corpora, as fractions.
TABLE1_SAMPLE_WEIGHTS = {
    "objects365": 0.183,
    "v3det": 0.027,
    "coco": 0.017,
    "lvis": 0.015,
    "visual_genome": 0.013,
    "refcoco": 0.010,
    "girt": 0.183,
    "groma_instruct": 0.005,
    "flickr30k_entities": 0.004,
    "llava_onevision": 0.262,
    "allava_4v_instruct": 0.196,
    "omnialign_v": 0.030,
    "gqa": 0.012,
}
# The listed detection rows sum to 45.7% against a stated 50/50 split with
# vision-language data; the missing 4.3% is assigned to this tag.
TABLE1_REMAINDER_TAG = "unlisted_detection"


@dataclass(frozen=True)
class PromptSpec:
    image_id: int
    categories: tuple[str, ...]
    positives: frozenset = frozenset()
    negatives: frozenset = frozenset()
    setting: str = "sampled"
    granularity: str = "word"

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "negatives", frozenset(self.negatives))
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        cats = set(self.categories)
        if len(cats) != len(self.categories):
            raise ValueError("duplicate category in prompt list")
        if self.positives & self.negatives:
            raise ValueError("a category cannot be both positive and negative")
        if self.positives | self.negatives != cats:
            raise ValueError("positives and negatives must partition the category list")
        if self.setting == "ground_truth_categories" and self.negatives:
            raise ValueError("ground-truth setting cannot carry negative categories")

    def index_of(self) -> dict[str, int]:
        """Normalized category name -> position in the prompt list."""
        return {normalize_name(c): i for i, c in enumerate(self.categories)}

    @property
    def ordered_positives(self) -> list[str]:
        return [c for c in self.categories if c in self.positives]


@dataclass(frozen=True)
class PromptRecord:
    prompt: str
    answer: str
    spec: PromptSpec
    source: str = ""
    seed: int | None = None

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "answer": self.answer,
            "image_id": self.spec.image_id,
            "setting": self.spec.setting,
            "granularity": self.spec.granularity,
            "categories": list(self.spec.categories),
            "seed": self.seed,
            "source": self.source,
        }


@dataclass(frozen=True)
class MixtureSpec:
    weights: tuple[tuple[str, float], ...]
    tolerance: float = field(default=1e-6, repr=False)

    def __post_init__(self):
        weights = tuple((str(t), float(w)) for t, w in self.weights)
        object.__setattr__(self, "weights", weights)
        tags = [t for t, _ in weights]
        if len(set(tags)) != len(tags):
            raise ValueError("mixture tags must be unique")
        for t, w in weights:
            if not (0.0 <= w <= 1.0) or math.isnan(w):
                raise ValueError(f"weight for {t!r} must lie in [0, 1], got {w}")
        total = math.fsum(w for _, w in weights)
        if abs(total - 1.0) > self.tolerance:
            raise WeightSumMismatch(f"weights sum to {total:.6g}, expected 1 (+/- {self.tolerance:g})")

    @classmethod
    def from_dict(cls, weights: dict[str, float]) -> MixtureSpec:
        return cls(tuple(weights.items()))

    @property
    def tags(self) -> list[str]:
        return [t for t, _ in self.weights]

    def as_dict(self) -> dict[str, float]:
        return dict(self.weights)


def table1_mixture(remainder_tag: str | None = TABLE1_REMAINDER_TAG) -> MixtureSpec:
    """Mixture with the published per-corpus sample weights.

    The published column sums to 0.957, so a valid mixture needs somewhere
    to put the remaining mass. By default it goes to ``remainder_tag``,
    which keeps every listed weight unchanged; pass ``None`` to rescale the
    13 weights proportionally instead.
    """
    weights = dict(TABLE1_SAMPLE_WEIGHTS)
    total = math.fsum(weights.values())
    if remainder_tag is None:
        return MixtureSpec.from_dict({t: w / total for t, w in weights.items()})
    weights[remainder_tag] = round(1.0 - total, 6)
    return MixtureSpec.from_dict(weights)


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_categories(
    ann: ImageAnnotation,
    vocab: CategoryVocab,
    neg_ratio: float = DEFAULT_NEG_RATIO,
    max_categories: int = DEFAULT_MAX_CATEGORIES,
    seed=0,
    granularity: str = "word",
) -> PromptSpec:
    """Draw positive and negative categories for one image.

    Every category present in the image is a positive (lowest ids kept when
    more than ``max_categories``). ``round(neg_ratio * n_pos)`` absent
    categories are added as negatives, and the union is shuffled. An image
    without instances samples ``round(neg_ratio)`` negatives (at least one)
    so that it can still teach rejection.
    """
    if neg_ratio < 0 or math.isnan(neg_ratio):
        raise ValueError("neg_ratio must be non-negative")
    if max_categories < 1:
        raise ValueError("max_categories must be positive")
    present = ann.category_ids
    for cid in present:
        vocab.by_id(cid)
    if not present and neg_ratio == 0:
        raise EmptyImage(f"image {ann.image_id} has no instances and neg_ratio is 0")

    rng = np.random.default_rng(seed)
    positives = present[:max_categories]
    if positives:
        n_neg = _half_up(neg_ratio * len(positives))
    else:
        n_neg = max(1, _half_up(neg_ratio))
    present_set = set(present)
    absent = [cid for cid in vocab.ids if cid not in present_set]
    n_neg = min(n_neg, len(absent), max_categories - len(positives))
    negatives = sorted(rng.choice(absent, size=n_neg, replace=False).tolist()) if n_neg > 0 else []
    chosen = positives + negatives
    if not chosen:
        raise EmptyImage(f"image {ann.image_id}: nothing to prompt")
    order = rng.permutation(len(chosen))
    names = [vocab.name_of(chosen[i]) for i in order]
    return PromptSpec(
        image_id=ann.image_id,
        categories=tuple(names),
        positives=frozenset(vocab.name_of(c) for c in positives),
        negatives=frozenset(vocab.name_of(c) for c in negatives),
        setting="sampled",
        granularity=granularity,
    )


def ground_truth_spec(ann: ImageAnnotation, vocab: CategoryVocab) -> PromptSpec:
    """Evaluation prompt listing only the categories present, in id order."""
    names = [vocab.name_of(cid) for cid in ann.category_ids]
    return PromptSpec(ann.image_id, tuple(names), frozenset(names), frozenset(), "ground_truth_categories")


def full_category_spec(ann: ImageAnnotation, vocab: CategoryVocab) -> PromptSpec:
    """Evaluation prompt listing the whole vocabulary in id order."""
    present = {vocab.name_of(cid) for cid in ann.category_ids}
    names = vocab.names
    return PromptSpec(
        ann.image_id, tuple(names), frozenset(present), frozenset(n for n in names if n not in present), "full_category"
    )


def refexp_spec(ref: RefExpression, image_id: int | None = None) -> tuple[ImageAnnotation, PromptSpec, CategoryVocab]:
    """Wrap one referring expression as a single-category prompt.

    The expression text occupies the category slot, so the same three-stage
    answer grammar serves every granularity.
    """
    name = " ".join(ref.expression.split())
    vocab = CategoryVocab((Category(1, name),))
    width = ref.width if ref.width is not None else max(ref.target.x2, 1.0)
    height = ref.height if ref.height is not None else max(ref.target.y2, 1.0)
    ann = ImageAnnotation(
        ref.image_id if image_id is None else image_id,
        width,
        height,
        (Instance(1, ref.target),),
        source="refexp",
    )
    spec = PromptSpec(ann.image_id, (name,), frozenset([name]), frozenset(), "ground_truth_categories", ref.granularity)
    return ann, spec, vocab


def render_prompt(spec: PromptSpec) -> str:
    if not spec.categories:
        raise EmptyCategoryList(f"image {spec.image_id}: empty category list")
    return "<image>\n Locate every " + ", ".join(spec.categories) + " in the image."


def format_coord(v: float) -> str:
    """Integer form when integral, else at most two decimals, shortest repr."""
    r = round(float(v), 2)
    if r == int(r):
        return str(int(r))
    return repr(r)


def canonical_boxes(ann: ImageAnnotation, spec: PromptSpec, vocab: CategoryVocab) -> list[tuple[str, BBox]]:
    """Positive instances ordered by prompt position, then left to right."""
    index = {name: i for i, name in enumerate(spec.categories)}
    items = []
    for inst in ann.instances:
        name = vocab.name_of(inst.category_id)
        if name in spec.positives:
            items.append((index[name], inst.box.sort_key(), name, inst.box))
    items.sort(key=lambda t: (t[0], t[1]))
    return [(name, box) for _, _, name, box in items]


def render_grounding(boxes: Sequence[tuple[str, BBox]]) -> str:
    if not boxes:
        return "[]"
    lines = []
    for name, b in boxes:
        coords = ", ".join(format_coord(c) for c in b.as_list())
        lines.append(f'  {{"bbox_2d": [{coords}], "label": {json.dumps(name, ensure_ascii=False)}}}')
    return "[\n" + ",\n".join(lines) + "\n]"


def render_stages(classification: Sequence[str], counts: Sequence[tuple[str, int]], boxes) -> str:
    return (
        f"{CLASSIFICATION_HEADER}\n{', '.join(classification)}\n\n"
        f"{COUNTING_HEADER}\n{'; '.join(f'{n}: {c}' for n, c in counts)}\n\n"
        f"{GROUNDING_HEADER}\n{render_grounding(boxes)}"
    )


def render_cot_answer(ann: ImageAnnotation, spec: PromptSpec, vocab: CategoryVocab) -> str:
    """Render the classification / counting / grounding target for one image."""
    boxes = canonical_boxes(ann, spec, vocab)
    tally: dict[str, int] = {}
    for name, _ in boxes:
        tally[name] = tally.get(name, 0) + 1
    present = [c for c in spec.categories if tally.get(c)]
    return render_stages(present, [(c, tally[c]) for c in present], boxes)


def build_record(ann, spec, vocab, source="", seed=None) -> PromptRecord:
    return PromptRecord(render_prompt(spec), render_cot_answer(ann, spec, vocab), spec, source or ann.source, seed)


def build_mixture(
    corpora: Sequence[tuple[str, int]],
    spec: MixtureSpec,
    total: int,
    seed: int = 0,
) -> Iterator[tuple[str, int]]:
    """Yield ``total`` draws of ``(tag, record_index)``.

    Each draw picks a corpus with probability equal to its weight. Within a
    corpus, indices walk a seeded permutation and start over once it is
    exhausted.
    """
    if total < 1:
        raise ValueError("total must be a positive integer")
    sizes = dict(corpora)
    for tag in spec.tags:
        if tag not in sizes:
            raise UnknownTag(f"mixture tag {tag!r} has no corpus")
        if spec.as_dict()[tag] > 0 and sizes[tag] < 1:
            raise ValueError(f"corpus {tag!r} is empty but has positive weight")
    tags = spec.tags
    probs = np.array([w for _, w in spec.weights], dtype=float)
    probs /= probs.sum()

    root = np.random.SeedSequence(seed)
    choice_seed, *corpus_seeds = root.spawn(len(tags) + 1)
    perms = [
        np.random.default_rng(s).permutation(sizes[t]) if sizes[t] > 0 else np.empty(0, dtype=int)
        for t, s in zip(tags, corpus_seeds)
    ]
    cursors = [0] * len(tags)
    draws = np.random.default_rng(choice_seed).choice(len(tags), size=total, p=probs)
    for k in draws.tolist():
        perm = perms[k]
        yield tags[k], int(perm[cursors[k] % len(perm)])
        cursors[k] += 1
