"""Line-delimited JSON helpers shared by every persisted artifact."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator


def dumps(record) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def read_jsonl(path) -> Iterator[dict]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def write_jsonl(path, records: Iterable) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def append_jsonl(path, record) -> None:
    with Path(path).open("a", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(record) + "\n")
