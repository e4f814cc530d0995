"""End-to-end evaluation: prompt -> backend -> parse -> validate -> score.

Artifacts written to the output directory (all line-delimited JSON keyed
by image id, rewritten in sorted order at the end of a run so repeated
runs are byte-identical):

``raw_responses.jsonl``
    ``{image_id, setting, prompt, raw_text}``; also the resume ledger.
``detections.jsonl``
    ``{image_id, detections: [{bbox, label, score}], consistency, warnings}``
``failures.jsonl``
    ``{image_id, error}``
``report.json`` / ``report.txt``
    structured report and the aligned text table.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Sequence

from .._jsonl import append_jsonl, read_jsonl, write_jsonl
from ..datasets import CategoryVocab, ImageAnnotation, RefExpression
from ..errors import Cot4DetError, EvalAborted
from ..metrics import EvalReport, evaluate_detections, format_detection_table, format_rec_table, rec_accuracy
from ..parser import DEFAULT_DUP_IOU, decode, detection_record
from ..prompts import full_category_spec, ground_truth_spec, refexp_spec, render_prompt
from .client import ChatClient, InferenceRequest
from .mock import FaultProfile, mock_generate

logger = logging.getLogger(__name__)

SETTING_ALIASES = {
    "gt": "ground_truth_categories",
    "ground_truth_categories": "ground_truth_categories",
    "full": "full_category",
    "full_category": "full_category",
}
ABORT_FRACTION = 0.5
RAW_FILE = "raw_responses.jsonl"
DET_FILE = "detections.jsonl"
FAIL_FILE = "failures.jsonl"


class MockBackend:
    """Pure backend; safe to call from many threads."""

    name = "mock"

    def __init__(self, profile: FaultProfile | None = None, cot: bool = True):
        self.profile = profile or FaultProfile()
        self.cot = cot

    def generate(self, ann, spec, vocab, prompt) -> str:
        return mock_generate(ann, spec, vocab, self.profile, self.cot)


class EndpointBackend:
    name = "endpoint"

    def __init__(self, client: ChatClient, image_root: str | None = None, max_tokens: int = 8192, temperature: float = 0.0):
        self.client = client
        self.image_root = image_root
        self.max_tokens = max_tokens
        self.temperature = temperature

    def image_ref(self, ann: ImageAnnotation) -> str:
        ref = ann.file_name or f"{ann.image_id}.jpg"
        if self.image_root and "://" not in ref:
            ref = f"{self.image_root.rstrip('/')}/{ref}"
        return ref

    def generate(self, ann, spec, vocab, prompt) -> str:
        req = InferenceRequest(self.image_ref(ann), prompt, self.max_tokens, self.temperature)
        return self.client.complete(req)


class ReplayBackend:
    """Serves raw texts from a predictions file.

    ``key`` names the field the texts are keyed by: ``image_id`` for
    detection runs, ``expression_id`` (position in the refexp file) for
    referring-expression runs.
    """

    name = "predictions"

    def __init__(self, texts: dict, key: str = "image_id"):
        self.texts = texts
        self.key = key

    @classmethod
    def from_file(cls, path, key: str = "image_id") -> ReplayBackend:
        return cls({rec[key]: rec["raw_text"] for rec in read_jsonl(path)}, key)

    def lookup(self, k) -> str:
        try:
            return self.texts[k]
        except KeyError:
            raise Cot4DetError(f"no prediction for {self.key} {k}") from None

    def generate(self, ann, spec, vocab, prompt) -> str:
        return self.lookup(ann.image_id)


def _spec_for(ann, vocab, setting):
    if setting == "ground_truth_categories":
        return ground_truth_spec(ann, vocab)
    return full_category_spec(ann, vocab)


def _query_all(jobs_list, call, jobs: int, on_done):
    """Run ``call(payload)`` for each item and report through ``on_done(key, text, exc)``."""
    if jobs <= 1 or len(jobs_list) <= 1:
        for key, payload in jobs_list:
            try:
                on_done(key, call(payload), None)
            except Cot4DetError as exc:
                on_done(key, None, exc)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {pool.submit(call, payload): key for key, payload in jobs_list}
        for fut in as_completed(futures):
            try:
                on_done(futures[fut], fut.result(), None)
            except Cot4DetError as exc:
                on_done(futures[fut], None, exc)


def run_eval(
    annotations: Sequence[ImageAnnotation],
    vocab: CategoryVocab,
    setting: str,
    backend,
    policy: str = "repair",
    out_dir=None,
    jobs: int = 8,
    dup_iou: float = DEFAULT_DUP_IOU,
    abort_fraction: float = ABORT_FRACTION,
    limit: int | None = None,
) -> EvalReport:
    """Evaluate one backend under one prompt setting.

    Images whose raw text is already in ``out_dir/raw_responses.jsonl`` are
    not re-queried, so an interrupted run can be resumed. ``limit`` stops
    querying after that many new images (used to exercise resumption).
    Raises :class:`EvalAborted` when more than ``abort_fraction`` of the
    prompted images fail; partial artifacts are still written.
    """
    setting = SETTING_ALIASES[setting]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    prompted = []
    for ann in sorted(annotations, key=lambda a: a.image_id):
        spec = _spec_for(ann, vocab, setting)
        if not spec.categories:
            continue  # ground-truth setting, image without objects: nothing to ask
        prompted.append((ann, spec))
    lengths = sorted({len(spec.categories) for _, spec in prompted})
    logger.info(
        "setting=%s: %d images, prompt category list length %s",
        setting,
        len(prompted),
        lengths[0] if len(lengths) == 1 else f"{lengths[0]}-{lengths[-1]}" if lengths else 0,
    )

    raw: dict[int, dict] = {}
    if out is not None and (out / RAW_FILE).exists():
        for rec in read_jsonl(out / RAW_FILE):
            if rec.get("setting") == setting:
                raw[rec["image_id"]] = rec
    failures: dict[int, str] = {}
    lock = threading.Lock()

    pending = [(ann.image_id, (ann, spec)) for ann, spec in prompted if ann.image_id not in raw]
    if limit is not None:
        pending = pending[:limit]

    def call(payload):
        ann, spec = payload
        return backend.generate(ann, spec, vocab, render_prompt(spec))

    def on_done(image_id, text, exc):
        with lock:
            if exc is not None:
                failures[image_id] = f"{type(exc).__name__}: {exc}"
                logger.warning("image %s failed: %s", image_id, failures[image_id])
                return
            rec = {"image_id": image_id, "setting": setting, "raw_text": text}
            raw[image_id] = rec
            if out is not None:
                append_jsonl(out / RAW_FILE, rec)

    _query_all(pending, call, jobs, on_done)

    done = [(ann, spec) for ann, spec in prompted if ann.image_id in raw]
    detections = {}
    det_records = []
    for ann, spec in done:
        ans, report, dets = decode(raw[ann.image_id]["raw_text"], spec, ann.width, ann.height, policy, dup_iou)
        detections[ann.image_id] = dets
        det_records.append(detection_record(ann.image_id, dets, report, ans.warnings))

    # failed or not-yet-queried images are left out of scoring entirely
    prompted_ids = {ann.image_id for ann, _ in prompted}
    scored = [ann for ann in annotations if ann.image_id not in prompted_ids or ann.image_id in raw]
    report = evaluate_detections(detections, scored, vocab, setting=setting, n_failed=len(failures))

    if out is not None:
        prompts = {ann.image_id: render_prompt(spec) for ann, spec in prompted}
        write_jsonl(
            out / RAW_FILE,
            ({**raw[k], "prompt": prompts[k]} for k in sorted(raw) if k in prompts),
        )
        write_jsonl(out / DET_FILE, det_records)
        write_jsonl(out / FAIL_FILE, ({"image_id": k, "error": failures[k]} for k in sorted(failures)))
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "report.txt").write_text(format_detection_table([(f"{setting}/{policy}", report)]), encoding="utf-8")

    if prompted and len(failures) > abort_fraction * len(prompted):
        raise EvalAborted(f"{len(failures)} of {len(prompted)} images failed", report)
    return report


def run_rec_eval(
    expressions: Sequence[RefExpression],
    backend,
    out_dir=None,
    policy: str = "repair",
    jobs: int = 8,
) -> tuple[float, list[dict]]:
    """Referring-expression accuracy; one prompt per expression, keyed by ``expression_id``."""
    items = []
    for k, ref in enumerate(expressions):
        ann, spec, vocab = refexp_spec(ref)
        items.append((k, (k, ann, spec, vocab)))
    texts: dict[int, str] = {}
    failures: dict[int, str] = {}
    lock = threading.Lock()

    by_expression = getattr(backend, "key", None) == "expression_id"

    def call(payload):
        k, ann, spec, vocab = payload
        if by_expression:
            return backend.lookup(k)
        return backend.generate(ann, spec, vocab, render_prompt(spec))

    def on_done(k, text, exc):
        with lock:
            if exc is not None:
                failures[k] = f"{type(exc).__name__}: {exc}"
            else:
                texts[k] = text

    _query_all(items, call, jobs, on_done)

    predictions = []
    records = []
    for (k, (_, ann, spec, _)), ref in zip(items, expressions):
        if k not in texts:
            predictions.append(None)
            continue
        ans, report, dets = decode(texts[k], spec, ref.width, ref.height, policy)
        predictions.append(dets)
        rec = detection_record(ann.image_id, dets, report, ans.warnings)
        records.append({"expression_id": k, "raw_text": texts[k], **rec})
    acc = rec_accuracy(predictions, expressions)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "rec_detections.jsonl", records)
        write_jsonl(out / FAIL_FILE, ({"expression_id": k, "error": failures[k]} for k in sorted(failures)))
        (out / "rec_report.txt").write_text(format_rec_table([("REC", acc)]), encoding="utf-8")
    if expressions and len(failures) > ABORT_FRACTION * len(expressions):
        raise EvalAborted(f"{len(failures)} of {len(expressions)} expressions failed")
    return acc, records


ABLATION_ROWS = ((True, "lenient"), (True, "repair"), (False, "lenient"), (False, "repair"))


def simulate_ablation(
    annotations: Sequence[ImageAnnotation],
    vocab: CategoryVocab,
    profile: FaultProfile,
    setting: str = "full_category",
    rows=ABLATION_ROWS,
    jobs: int = 1,
) -> list[tuple[str, EvalReport]]:
    """Score the mock model for each (cot, policy) row on one corpus."""
    out = []
    for cot, policy in rows:
        report = run_eval(annotations, vocab, setting, MockBackend(profile, cot), policy, jobs=jobs)
        out.append((f"cot={'on' if cot else 'off'} {policy}", report))
    return out
