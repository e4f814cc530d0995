"""Command-line interface: ``cot4det {convert,prompts,mix,eval,simulate,report}``.

Exit codes: 0 success, 1 evaluation-level failure (abort threshold
exceeded), 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from ._jsonl import read_jsonl, write_jsonl
from ._validation import SETTING_CHOICES, check_non_negative, check_positive_int, check_rate
from .datasets import load_coco, load_lvis_bands, load_refexp
from .errors import Cot4DetError, EvalAborted
from .harness.client import ENDPOINT_ENV, ChatClient
from .harness.mock import FaultProfile
from .harness.runner import EndpointBackend, MockBackend, ReplayBackend, run_eval, run_rec_eval, simulate_ablation
from .metrics import EvalReport, format_detection_table, format_rec_table
from .parser import DEFAULT_DUP_IOU, POLICIES
from .prompts import (
    DEFAULT_MAX_CATEGORIES,
    DEFAULT_NEG_RATIO,
    GRANULARITIES,
    MixtureSpec,
    build_mixture,
    build_record,
    full_category_spec,
    ground_truth_spec,
    refexp_spec,
    render_prompt,
    sample_categories,
    table1_mixture,
)

logger = logging.getLogger("cot4det")


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit code 2."""


def _shared(seed=True, jobs=False, out_help="output path"):
    p = argparse.ArgumentParser(add_help=False)
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    if jobs:
        p.add_argument("--jobs", type=int, default=8, help="concurrent backend requests (default: 8)")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return p


def _add_faults(p):
    g = p.add_argument_group("mock fault profile")
    g.add_argument("--dup-rate", type=float, default=0.0, help="probability a box is re-emitted")
    g.add_argument("--max-dups", type=int, default=1, help="extra copies per duplicated box are drawn from 1..N")
    g.add_argument("--halluc-rate", type=float, default=0.0, help="probability of a box for each negative category")
    g.add_argument("--small-miss-rate", type=float, default=0.0, help="drop probability for objects under 32x32 px (a quarter of it otherwise)")
    g.add_argument("--jitter", type=float, default=0.0, help="uniform coordinate noise in pixels")
    g.add_argument("--corrupt-counts", action="store_true", help="let counting reflect duplicates and hallucinations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cot4det", description="Chain-of-thought detection data and evaluation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("convert", parents=[_shared(out_help="output PromptRecord .jsonl file")], help="annotations -> prompt/answer records")
    p.add_argument("annotations", help="COCO/LVIS json (word) or refexp .jsonl (phrase, sentence)")
    p.add_argument("--granularity", choices=GRANULARITIES, default="word", help="prompt granularity (default: word)")
    p.add_argument("--setting", choices=["sampled", *SETTING_CHOICES], default="sampled", help="category selection (default: sampled)")
    p.add_argument("--neg-ratio", type=float, default=DEFAULT_NEG_RATIO, help="negatives per positive category")
    p.add_argument("--max-categories", type=int, default=DEFAULT_MAX_CATEGORIES, help="cap on prompt category list")

    p = sub.add_parser("prompts", parents=[_shared(seed=False, out_help="output .jsonl of evaluation prompts")], help="render evaluation prompts only")
    p.add_argument("annotations", help="COCO-style json")
    p.add_argument("--setting", choices=list(SETTING_CHOICES), default="full", help="evaluation setting (default: full)")

    p = sub.add_parser("mix", parents=[_shared(out_help="output mixed .jsonl file")], help="weighted corpus mixture")
    p.add_argument("--weights", required=True, help="json object {tag: weight}, or the built-in name 'table1'")
    p.add_argument("--corpus", action="append", default=[], metavar="TAG=PATH", help="line-delimited corpus (repeatable)")
    p.add_argument("--total", type=int, required=True, help="number of draws")

    p = sub.add_parser("eval", parents=[_shared(jobs=True, seed=False, out_help="output directory")], help="evaluate a model or predictions file")
    p.add_argument("annotations", nargs="?", help="COCO-style json (omit with --refexp)")
    p.add_argument("--refexp", help="refexp .jsonl; reports referring-expression accuracy instead")
    p.add_argument("--lvis", help="LVIS-style category file supplying rare/common/frequent bands")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--predictions", help=".jsonl of {image_id, prompt_setting, raw_text} (expression_id for --refexp)")
    src.add_argument("--endpoint", help=f"chat-completions URL (default: ${ENDPOINT_ENV})")
    src.add_argument("--mock", action="store_true", help="use the deterministic mock model")
    p.add_argument("--model", default="default", help="model name sent to the endpoint")
    p.add_argument("--retries", type=int, default=4, help="retries on transient endpoint errors")
    p.add_argument("--max-tokens", type=int, default=8192, help="generation limit per request")
    p.add_argument("--temperature", type=float, default=0.0, help="sampling temperature")
    p.add_argument("--image-root", help="prefix joined to COCO file_name to form image references")
    p.add_argument("--setting", choices=list(SETTING_CHOICES), default="full", help="evaluation setting (default: full)")
    p.add_argument("--policy", choices=POLICIES, default="repair", help="answer conversion policy (default: repair)")
    p.add_argument("--dup-iou", type=float, default=DEFAULT_DUP_IOU, help="same-label IoU that marks duplicates")
    p.add_argument("--seed", type=int, default=0, help="mock model seed (default: 0)")
    p.add_argument("--no-cot", action="store_true", help="mock emits a bare box list")
    _add_faults(p)

    p = sub.add_parser("simulate", parents=[_shared(jobs=True, out_help="output directory")], help="CoT x policy ablation on the mock model")
    p.add_argument("annotations", help="COCO-style json")
    p.add_argument("--setting", choices=list(SETTING_CHOICES), default="full", help="evaluation setting (default: full)")
    p.add_argument("--policies", default="lenient,repair", help="comma-separated policies per CoT arm (default: lenient,repair)")
    _add_faults(p)

    p = sub.add_parser("report", parents=[_shared(seed=False, out_help="output text table")], help="tabulate report.json files")
    p.add_argument("reports", nargs="+", help="report.json files")
    return parser


def _load_coco(path, lvis=None):
    index = load_coco(path)
    vocab = load_lvis_bands(lvis, index.vocab) if lvis else index.vocab
    if index.dropped:
        logger.info("%s: dropped %d zero-area annotations", path, index.dropped)
    return index, vocab


def _profile(args) -> FaultProfile:
    return FaultProfile(
        duplication_rate=check_rate(args.dup_rate, "--dup-rate"),
        max_duplicates=check_positive_int(args.max_dups, "--max-dups"),
        hallucination_rate=check_rate(args.halluc_rate, "--halluc-rate"),
        small_miss_rate=check_rate(args.small_miss_rate, "--small-miss-rate"),
        jitter=check_non_negative(args.jitter, "--jitter"),
        seed=args.seed,
        corrupt_counts=args.corrupt_counts,
    )


def cmd_convert(args) -> int:
    check_non_negative(args.neg_ratio, "--neg-ratio")
    check_positive_int(args.max_categories, "--max-categories")
    records = []
    if args.granularity == "word":
        index, vocab = _load_coco(args.annotations)
        skipped = 0
        for ann in index.images:
            if args.setting == "sampled":
                if not ann.instances and args.neg_ratio == 0:
                    skipped += 1
                    continue
                spec = sample_categories(ann, vocab, args.neg_ratio, args.max_categories, seed=[args.seed, ann.image_id])
            elif args.setting == "gt":
                spec = ground_truth_spec(ann, vocab)
                if not spec.categories:
                    skipped += 1
                    continue
            else:
                spec = full_category_spec(ann, vocab)
            records.append(build_record(ann, spec, vocab, seed=args.seed))
        if skipped:
            logger.info("skipped %d images with nothing to prompt", skipped)
    else:
        for ref in load_refexp(args.annotations):
            if ref.granularity != args.granularity:
                continue
            ann, spec, vocab = refexp_spec(ref)
            records.append(build_record(ann, spec, vocab, source="refexp", seed=args.seed))
    n = write_jsonl(args.out, (r.to_json() for r in records))
    print(f"wrote {n} records to {args.out}")
    for gran, count in sorted(Counter(r.spec.granularity for r in records).items()):
        print(f"  {gran}: {count}")
    return 0


def cmd_prompts(args) -> int:
    index, vocab = _load_coco(args.annotations)
    setting = SETTING_CHOICES[args.setting]
    out = []
    for ann in index.images:
        spec = ground_truth_spec(ann, vocab) if setting == "ground_truth_categories" else full_category_spec(ann, vocab)
        if not spec.categories:
            continue
        out.append(
            {"image_id": ann.image_id, "image": ann.file_name, "setting": setting, "prompt": render_prompt(spec), "categories": list(spec.categories)}
        )
    n = write_jsonl(args.out, out)
    print(f"wrote {n} prompts to {args.out}")
    return 0


def _read_weights(spec: str) -> MixtureSpec:
    if spec == "table1":
        return table1_mixture()
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(spec)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise UsageError(f"{spec}: weights must be a JSON object of tag -> weight")
    return MixtureSpec.from_dict(doc)


def cmd_mix(args) -> int:
    check_positive_int(args.total, "--total")
    mixture = _read_weights(args.weights)
    corpora = {}
    for item in args.corpus:
        tag, sep, path = item.partition("=")
        if not sep or not tag or not path:
            raise UsageError(f"--corpus expects TAG=PATH, got {item!r}")
        corpora[tag] = list(read_jsonl(path))
    draws = build_mixture([(t, len(r)) for t, r in corpora.items()], mixture, args.total, args.seed)
    counts: Counter = Counter()

    def rows():
        for tag, idx in draws:
            counts[tag] += 1
            yield {"source": tag, "index": idx, "record": corpora[tag][idx]}

    n = write_jsonl(args.out, rows())
    print(f"wrote {n} records to {args.out}")
    for tag, w in mixture.weights:
        print(f"  {tag:<24} target {100 * w:6.2f}%  drawn {100 * counts[tag] / n:6.2f}%")
    return 0


def _backend(args):
    if args.mock:
        return MockBackend(_profile(args), cot=not args.no_cot)
    if args.predictions:
        return ReplayBackend.from_file(args.predictions, key="expression_id" if args.refexp else "image_id")
    endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise UsageError(f"choose --predictions, --mock or --endpoint (or set {ENDPOINT_ENV})")
    client = ChatClient(endpoint, args.model, retries=args.retries, concurrency=max(1, args.jobs))
    return EndpointBackend(client, args.image_root, args.max_tokens, args.temperature)


def cmd_eval(args) -> int:
    check_rate(args.dup_iou, "--dup-iou")
    if bool(args.refexp) == bool(args.annotations):
        raise UsageError("give either an annotations file or --refexp")
    backend = _backend(args)
    out = Path(args.out)
    try:
        if args.refexp:
            expressions = load_refexp(args.refexp)
            acc, _ = run_rec_eval(expressions, backend, out, args.policy, args.jobs)
            table = format_rec_table([(f"refexp/{args.policy}", acc)])
        else:
            index, vocab = _load_coco(args.annotations, args.lvis)
            report = run_eval(index.images, vocab, args.setting, backend, args.policy, out, args.jobs, args.dup_iou)
            table = format_detection_table([(f"{report.setting}/{args.policy}", report)])
    finally:
        client = getattr(backend, "client", None)
        if client is not None:
            client.close()
    sys.stdout.write(table)
    return 0


def cmd_simulate(args) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for p in policies:
        if p not in POLICIES:
            raise UsageError(f"unknown policy {p!r} in --policies")
    index, vocab = _load_coco(args.annotations)
    rows = [(cot, p) for cot in (True, False) for p in policies]
    results = simulate_ablation(index.images, vocab, _profile(args), SETTING_CHOICES[args.setting], rows, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {name: r.to_dict() for name, r in results}
    (out / "simulate.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = _ablation_table(results)
    (out / "simulate.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def _ablation_table(results) -> str:
    def pct(v):
        return "-" if v is None else f"{100 * v:.1f}"

    rows = [["Run", "P@0.5", "R@0.5", "mAP", "AP_small"]]
    rows += [[name, pct(r.precision), pct(r.recall), pct(r.map), pct(r.ap_small)] for name, r in results]
    widths = [max(len(r[c]) for r in rows) for c in range(5)]
    return "".join(
        "  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]) + "\n" for r in rows
    )


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        p = Path(path)
        report = EvalReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
        rows.append((p.parent.name or p.stem, report))
    table = format_detection_table(rows)
    Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


COMMANDS = {
    "convert": cmd_convert,
    "prompts": cmd_prompts,
    "mix": cmd_mix,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except EvalAborted as exc:
        print(f"error: evaluation aborted: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (Cot4DetError, UsageError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
