"""Parsing, consistency checking and repair of three-stage detection answers.

Parsing is deliberately forgiving (code fences, prose, header case,
truncated lists); every anomaly becomes a warning. Strictness lives in
:func:`validate` and the ``strict`` policy of :func:`to_detections`.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .datasets import normalize_name
from .errors import MalformedBox, NoParsableContent
from .geometry import BBox, iou
from .prompts import PromptSpec

__all__ = [
    "POLICIES",
    "STAGES",
    "ParsedAnswer",
    "ConsistencyReport",
    "Detection",
    "parse_cot_answer",
    "parse_or_empty",
    "validate",
    "to_detections",
    "decode",
    "detection_record",
]

POLICIES = ("lenient", "strict", "repair")
STAGES = ("classification", "counting", "grounding")
DEFAULT_DUP_IOU = 0.9
# overshoot (px) below which repair clamps instead of dropping
CLAMP_TOLERANCE = 1.0

_HEADER = re.compile(
    r"(category[ \t]*classification|category[ \t]*counting|grounding[ \t]*boxes)[ \t]*[*_]*[ \t]*:",
    re.IGNORECASE,
)
_FENCE = re.compile(r"```[A-Za-z0-9_+-]*")
_COUNT = re.compile(r"^(.*\S)\s*:\s*(\d+)$", re.DOTALL)
_EMPTY_LIST = re.compile(r"\[\s*\]")
_DECOR = " \t\r\n*#_`>"


@dataclass(frozen=True)
class ParsedAnswer:
    classification: tuple[str, ...] = ()
    counts: tuple[tuple[str, int], ...] = ()
    boxes: tuple[tuple[BBox, str], ...] = ()
    warnings: tuple[str, ...] = ()
    missing_stages: frozenset = frozenset()

    @property
    def declared(self) -> dict[str, int]:
        return dict(self.counts)

    @property
    def labels(self) -> list[str]:
        return [label for _, label in self.boxes]


@dataclass(frozen=True)
class ConsistencyReport:
    classification_counts_agree: bool
    counts_boxes_agree: bool
    count_deltas: dict = field(default_factory=dict)
    labels_subset_of_prompt: bool = True
    ordering_canonical: bool = True
    boxes_within_image: bool = True
    duplicate_groups: tuple[tuple[int, ...], ...] = ()
    width: float | None = None
    height: float | None = None
    dup_iou: float = DEFAULT_DUP_IOU

    @property
    def ok(self) -> bool:
        return (
            self.classification_counts_agree
            and self.counts_boxes_agree
            and self.labels_subset_of_prompt
            and self.ordering_canonical
            and self.boxes_within_image
            and not self.duplicate_groups
        )

    def flags(self) -> dict:
        return {
            "classification_counts_agree": self.classification_counts_agree,
            "counts_boxes_agree": self.counts_boxes_agree,
            "count_deltas": dict(sorted(self.count_deltas.items())),
            "labels_subset_of_prompt": self.labels_subset_of_prompt,
            "ordering_canonical": self.ordering_canonical,
            "boxes_within_image": self.boxes_within_image,
            "duplicate_groups": [list(g) for g in self.duplicate_groups],
        }


@dataclass(frozen=True, slots=True)
class Detection:
    box: BBox
    label: str
    score: float = 1.0


def _strip_decor(s: str) -> str:
    return s.strip(_DECOR)


def _split_sections(text: str) -> tuple[dict[str, str], list[str], int]:
    """Map stage name -> raw section text (first occurrence wins)."""
    matches = list(_HEADER.finditer(text))
    sections: dict[str, str] = {}
    warnings = []
    for i, m in enumerate(matches):
        key = m.group(1).lower()
        stage = "classification" if "classif" in key else "counting" if "count" in key else "grounding"
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        if stage in sections:
            warnings.append(f"repeated {stage} header ignored")
            continue
        sections[stage] = text[m.end() : end]
    return sections, warnings, len(matches)


def _scan_objects(text: str) -> tuple[list[str], bool]:
    """Top-level ``{...}`` substrings; the flag reports an unterminated one."""
    out = []
    depth = 0
    start = -1
    in_str = False
    escape = False
    for i, ch in enumerate(text):
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            if depth > 0:
                in_str = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                out.append(text[start : i + 1])
    return out, depth > 0


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _parse_records(text: str, warnings: list[str]) -> tuple[list[tuple[BBox, str]], int]:
    boxes = []
    chunks, truncated = _scan_objects(text)
    if truncated:
        warnings.append("unterminated record at end of grounding list")
    for k, chunk in enumerate(chunks):
        try:
            rec = json.loads(chunk)
        except (ValueError, RecursionError):
            warnings.append(f"record {k}: not valid JSON")
            continue
        if not isinstance(rec, dict):
            warnings.append(f"record {k}: not an object")
            continue
        coords = rec.get("bbox_2d", rec.get("bbox"))
        label = rec.get("label")
        if not isinstance(coords, list) or len(coords) != 4 or not all(_number(c) for c in coords):
            warnings.append(f"record {k}: bbox_2d must be 4 finite numbers")
            continue
        if not isinstance(label, str) or not normalize_name(label):
            warnings.append(f"record {k}: missing label")
            continue
        try:
            box = BBox(*coords)
        except MalformedBox as exc:
            warnings.append(f"record {k}: degenerate box ({exc})")
            continue
        boxes.append((box, normalize_name(label)))
    return boxes, len(chunks) + truncated


def _parse_classification(section: str, warnings: list[str]) -> list[str]:
    names = []
    for part in re.split(r"[,\n]", section):
        name = normalize_name(_strip_decor(part))
        if not name:
            continue
        if name in names:
            warnings.append(f"classification: duplicate {name!r}")
            continue
        names.append(name)
    return names


def _parse_counting(section: str, warnings: list[str]) -> list[tuple[str, int]]:
    counts: list[tuple[str, int]] = []
    seen = set()
    for part in re.split(r"[;\n]", section):
        part = _strip_decor(part)
        if not part:
            continue
        m = _COUNT.match(part)
        if not m:
            warnings.append(f"counting: malformed entry {part[:40]!r}")
            continue
        name = normalize_name(_strip_decor(m.group(1)))
        if not name:
            warnings.append(f"counting: malformed entry {part[:40]!r}")
            continue
        if name in seen:
            warnings.append(f"counting: duplicate {name!r}")
            continue
        seen.add(name)
        counts.append((name, int(m.group(2))))
    return counts


def _first_seen(labels) -> list[str]:
    return list(dict.fromkeys(labels))


def parse_cot_answer(text: str) -> ParsedAnswer:
    """Recover classification, counts and boxes from raw model text.

    Raises :class:`NoParsableContent` only when neither a stage header nor a
    box record (nor a bare empty list) can be found.
    """
    if not isinstance(text, str):
        raise NoParsableContent(f"expected text, got {type(text).__name__}")
    clean = _FENCE.sub("", text)
    sections, warnings, n_headers = _split_sections(clean)

    if "grounding" in sections:
        boxes, _ = _parse_records(sections["grounding"], warnings)
    else:
        # bare record list from a non-CoT model, or headers without grounding
        chunks, truncated = _scan_objects(clean)
        recordish = truncated or any("bbox" in c.lower() or "label" in c.lower() for c in chunks)
        bare_empty = _EMPTY_LIST.search(clean) is not None
        if not sections and not recordish and not bare_empty:
            raise NoParsableContent("no stage header or box record found")
        boxes = _parse_records(clean, warnings)[0] if recordish else []
        if not sections:
            warnings.append("grounding-only answer")
        elif recordish:
            warnings.append("missing grounding header; records recovered")
        else:
            warnings.append("missing stage: grounding")

    missing = set()
    if "classification" in sections:
        classification = _parse_classification(sections["classification"], warnings)
    else:
        missing.add("classification")
        classification = _first_seen(label for _, label in boxes)
        warnings.append("missing stage: classification (inferred from boxes)")
    if "counting" in sections:
        counts = _parse_counting(sections["counting"], warnings)
    else:
        missing.add("counting")
        counts = list(Counter(label for _, label in boxes).items())
        warnings.append("missing stage: counting (inferred from boxes)")
    if "grounding" not in sections:
        missing.add("grounding")

    return ParsedAnswer(
        tuple(classification),
        tuple(counts),
        tuple(boxes),
        tuple(warnings),
        frozenset(missing),
    )


def parse_or_empty(text: str) -> ParsedAnswer:
    """Like :func:`parse_cot_answer` but maps unparsable text (e.g. a refusal) to an empty answer."""
    try:
        return parse_cot_answer(text)
    except NoParsableContent as exc:
        return ParsedAnswer(warnings=(f"no parsable content: {exc}",), missing_stages=frozenset(STAGES))


def _duplicate_groups(boxes, dup_iou: float) -> tuple[tuple[int, ...], ...]:
    parent = list(range(len(boxes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    by_label: dict[str, list[int]] = {}
    for i, (_, label) in enumerate(boxes):
        by_label.setdefault(label, []).append(i)
    for idx in by_label.values():
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                i, j = idx[a], idx[b]
                if iou(boxes[i][0], boxes[j][0]) >= dup_iou:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(len(boxes)):
        groups.setdefault(find(i), []).append(i)
    return tuple(tuple(g) for g in sorted(groups.values()) if len(g) > 1)


def validate(
    ans: ParsedAnswer,
    spec: PromptSpec,
    width: float | None,
    height: float | None,
    dup_iou: float = DEFAULT_DUP_IOU,
) -> ConsistencyReport:
    """Check cross-stage consistency of a parsed answer. Never raises."""
    declared = ans.declared
    emitted = Counter(ans.labels)
    class_set = set(ans.classification)
    positive_counts = {n for n, c in ans.counts if c > 0}

    deltas = {n: declared.get(n, 0) - emitted.get(n, 0) for n in set(declared) | set(emitted)}
    prompt_index = spec.index_of()
    allowed = set(prompt_index)
    labels_ok = all(lbl in allowed for lbl in emitted) and class_set <= allowed

    keys = [(prompt_index.get(lbl, len(prompt_index)), box.sort_key()) for box, lbl in ans.boxes]
    ordering_ok = all(keys[i] <= keys[i + 1] for i in range(len(keys) - 1))

    if width is None or height is None:
        within = True
    else:
        within = all(box.within(width, height) for box, _ in ans.boxes)

    return ConsistencyReport(
        classification_counts_agree=class_set == positive_counts,
        counts_boxes_agree=all(d == 0 for d in deltas.values()),
        count_deltas=deltas,
        labels_subset_of_prompt=labels_ok,
        ordering_canonical=ordering_ok,
        boxes_within_image=within,
        duplicate_groups=_duplicate_groups(ans.boxes, dup_iou),
        width=width,
        height=height,
        dup_iou=dup_iou,
    )


def _with_scores(kept) -> list[Detection]:
    n = len(kept)
    return [Detection(box, label, 1.0 - i / (n + 1)) for i, (box, label) in enumerate(kept)]


def to_detections(ans: ParsedAnswer, report: ConsistencyReport, policy: str = "repair") -> list[Detection]:
    """Turn parsed boxes into scored detections under a repair policy.

    ``repair`` applies, in order: drop labels missing from the
    classification stage, keep the earliest box of each duplicate group,
    truncate each label to its declared count, then clamp sub-pixel
    overshoot and drop larger overshoot. Pseudo-scores follow emission
    order: the i-th survivor of n gets ``1 - i / (n + 1)``.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    boxes = list(ans.boxes)
    if policy == "lenient":
        return _with_scores(boxes)
    if policy == "strict":
        return _with_scores(boxes) if report.ok else []

    classified = set(ans.classification)
    alive = [lbl in classified for _, lbl in boxes]
    for group in report.duplicate_groups:
        for i in group[1:]:
            alive[i] = False
    declared = ans.declared
    used: Counter = Counter()
    kept = []
    for ok, (box, label) in zip(alive, boxes):
        if not ok:
            continue
        if used[label] >= declared.get(label, 0):
            continue
        used[label] += 1
        kept.append((box, label))
    if report.width is not None and report.height is not None:
        clamped = []
        for box, label in kept:
            over = box.overshoot(report.width, report.height)
            if over == 0:
                clamped.append((box, label))
            elif over < CLAMP_TOLERANCE:
                try:
                    clamped.append((box.clamp(report.width, report.height), label))
                except MalformedBox:
                    pass
        kept = clamped
    return _with_scores(kept)


def decode(
    text: str,
    spec: PromptSpec,
    width: float | None,
    height: float | None,
    policy: str = "repair",
    dup_iou: float = DEFAULT_DUP_IOU,
) -> tuple[ParsedAnswer, ConsistencyReport, list[Detection]]:
    """parse -> validate -> convert, with refusals mapped to zero detections."""
    ans = parse_or_empty(text)
    report = validate(ans, spec, width, height, dup_iou)
    return ans, report, to_detections(ans, report, policy)


def detection_record(image_id, detections, report: ConsistencyReport | None = None, warnings=()) -> dict:
    """Line-delimited output record for one answer."""
    rec = {
        "image_id": image_id,
        "detections": [
            {"bbox": d.box.as_list(), "label": d.label, "score": d.score} for d in detections
        ],
        "warnings": list(warnings),
    }
    if report is not None:
        rec["consistency"] = report.flags()
    return rec
