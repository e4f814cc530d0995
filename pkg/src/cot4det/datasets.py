"""Annotation ingestion: COCO/LVIS documents and line-delimited refexp files.

Everything loaded here is immutable and safe to share between threads.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import BandConflict, MalformedBox, MissingField, UnknownCategory, UnknownGranularity
from .geometry import BBox

__all__ = [
    "BANDS",
    "Category",
    "CategoryVocab",
    "Instance",
    "ImageAnnotation",
    "RefExpression",
    "CocoIndex",
    "normalize_name",
    "load_coco",
    "parse_coco",
    "load_lvis_bands",
    "band_from_image_count",
    "load_refexp",
    "dump_index",
]

BANDS = ("rare", "common", "frequent", "unknown")
REFEXP_GRANULARITIES = ("phrase", "sentence")
REFEXP_FIELDS = ("image_id", "expression", "bbox", "granularity")

_LVIS_FREQ = {"r": "rare", "c": "common", "f": "frequent"}
_WS = re.compile(r"\s+")
_TRAILING_PUNCT = string.punctuation + "。，；："
# Boxes may overshoot the image by less than this many pixels; they get clamped.
OVERSHOOT_TOLERANCE = 1.0


def normalize_name(name: str) -> str:
    """Lowercase, trim, collapse whitespace and strip trailing punctuation."""
    out = _WS.sub(" ", name.strip().lower())
    return out.rstrip(_TRAILING_PUNCT).rstrip()


@dataclass(frozen=True, slots=True)
class Category:
    id: int
    name: str
    band: str = "unknown"


@dataclass(frozen=True)
class CategoryVocab:
    """Ordered category universe with unique ids and unique normalized names."""

    entries: tuple[Category, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        by_id, by_name = {}, {}
        for c in entries:
            if c.band not in BANDS:
                raise ValueError(f"unknown frequency band {c.band!r} for category {c.id}")
            if c.id in by_id:
                raise ValueError(f"duplicate category id {c.id}")
            if c.name in by_name:
                raise ValueError(f"duplicate category name {c.name!r}")
            by_id[c.id] = c
            by_name[c.name] = c
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_by_name", by_name)

    @classmethod
    def from_names(cls, names: Iterable[str], start_id: int = 1) -> CategoryVocab:
        return cls(tuple(Category(i, normalize_name(n)) for i, n in enumerate(names, start_id)))

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[Category]:
        return iter(self.entries)

    def __contains__(self, category_id):
        return category_id in self._by_id

    def by_id(self, category_id: int) -> Category:
        try:
            return self._by_id[category_id]
        except KeyError:
            raise UnknownCategory(category_id) from None

    def by_name(self, name: str) -> Category | None:
        return self._by_name.get(normalize_name(name))

    def name_of(self, category_id: int) -> str:
        return self.by_id(category_id).name

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.entries]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.entries]

    def with_bands(self, bands: dict[int, str]) -> CategoryVocab:
        return CategoryVocab(tuple(replace(c, band=bands.get(c.id, c.band)) for c in self.entries))


@dataclass(frozen=True, slots=True)
class Instance:
    category_id: int
    box: BBox


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: int
    width: float
    height: float
    instances: tuple[Instance, ...] = ()
    source: str = "coco"
    file_name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            if not inst.box.within(self.width, self.height):
                raise MalformedBox(
                    f"box {inst.box.as_list()} outside image {self.image_id} "
                    f"({self.width}x{self.height})"
                )

    @property
    def category_ids(self) -> list[int]:
        """Distinct category ids present, ascending."""
        return sorted({inst.category_id for inst in self.instances})


@dataclass(frozen=True, slots=True)
class RefExpression:
    image_id: int
    expression: str
    target: BBox
    granularity: str
    width: float | None = None
    height: float | None = None

    def __post_init__(self):
        if self.granularity not in REFEXP_GRANULARITIES:
            raise UnknownGranularity(self.granularity)


@dataclass(frozen=True)
class CocoIndex:
    """Result of loading a COCO-style document."""

    vocab: CategoryVocab
    images: tuple[ImageAnnotation, ...]
    dropped: int = 0
    clamped: int = 0

    def __iter__(self):
        # allows ``vocab, images = load_coco(path)``
        yield self.vocab
        yield self.images

    @property
    def n_instances(self) -> int:
        return sum(len(im.instances) for im in self.images)


def _require(record, key, index, source):
    if not isinstance(record, dict) or key not in record:
        raise MissingField(key, index, source)
    return record[key]


def _clamp_to_image(x1, y1, x2, y2, width, height, ann_id):
    over = max(x2 - width, y2 - height, -x1, -y1)
    if over <= 0:
        return (x1, y1, x2, y2), False
    if over >= OVERSHOOT_TOLERANCE:
        raise MalformedBox(
            f"annotation {ann_id}: box [{x1}, {y1}, {x2}, {y2}] exceeds image "
            f"{width}x{height} by {over:g}px"
        )
    return (max(x1, 0.0), max(y1, 0.0), min(x2, width), min(y2, height)), True


def parse_coco(doc: dict, source: str = "coco") -> CocoIndex:
    """Build a :class:`CocoIndex` from an already-decoded COCO document."""
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc, dict) or key not in doc:
            raise MissingField(key, 0, source)

    cats = []
    for i, rec in enumerate(doc["categories"]):
        cid = _require(rec, "id", i, "categories")
        name = _require(rec, "name", i, "categories")
        cats.append(Category(int(cid), normalize_name(str(name))))
    vocab = CategoryVocab(tuple(sorted(cats, key=lambda c: c.id)))

    dims = {}
    files = {}
    for i, rec in enumerate(doc["images"]):
        iid = int(_require(rec, "id", i, "images"))
        dims[iid] = (float(_require(rec, "width", i, "images")), float(_require(rec, "height", i, "images")))
        files[iid] = rec.get("file_name") or rec.get("coco_url")

    per_image: dict[int, list[Instance]] = {iid: [] for iid in dims}
    dropped = clamped = 0
    for i, rec in enumerate(doc["annotations"]):
        ann_id = rec.get("id", i) if isinstance(rec, dict) else i
        iid = int(_require(rec, "image_id", i, "annotations"))
        cid = int(_require(rec, "category_id", i, "annotations"))
        bbox = _require(rec, "bbox", i, "annotations")
        if cid not in vocab:
            raise UnknownCategory(cid, ann_id)
        if iid not in dims:
            raise MissingField("images[id=%d]" % iid, i, "annotations")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise MalformedBox(f"annotation {ann_id}: bbox must have 4 numbers, got {bbox!r}")
        x, y, w, h = (float(v) for v in bbox)
        if w < 0 or h < 0:
            raise MalformedBox(f"annotation {ann_id}: negative size w={w:g} h={h:g}")
        if w == 0 or h == 0:
            dropped += 1
            continue
        width, height = dims[iid]
        coords, was_clamped = _clamp_to_image(x, y, x + w, y + h, width, height, ann_id)
        clamped += was_clamped
        try:
            box = BBox(*coords)
        except MalformedBox as exc:
            raise MalformedBox(f"annotation {ann_id}: {exc}") from None
        per_image[iid].append(Instance(cid, box))

    images = tuple(
        ImageAnnotation(iid, *dims[iid], instances=tuple(per_image[iid]), source=source, file_name=files[iid])
        for iid in sorted(dims)
    )
    return CocoIndex(vocab, images, dropped, clamped)


def load_coco(path, source: str | None = None) -> CocoIndex:
    """Load a COCO-style annotation file.

    Boxes are converted from ``[x, y, w, h]`` to corner form. Annotations
    with zero width or height are dropped and counted in ``dropped``;
    negative sizes raise :class:`MalformedBox`.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        doc = json.load(fh)
    return parse_coco(doc, source=source or path.stem)


def band_from_image_count(count: int) -> str:
    if count <= 0:
        return "unknown"
    if count <= 10:
        return "rare"
    if count <= 100:
        return "common"
    return "frequent"


def load_lvis_bands(path, vocab: CategoryVocab) -> CategoryVocab:
    """Assign rare/common/frequent bands from an LVIS-style category list.

    ``frequency`` (r/c/f) wins when present; otherwise ``image_count`` is
    bucketed as 1-10 rare, 11-100 common, >100 frequent.
    """
    with Path(path).open(encoding="utf-8") as fh:
        doc = json.load(fh)
    records = doc["categories"] if isinstance(doc, dict) else doc
    bands = {}
    for i, rec in enumerate(records):
        cid = int(_require(rec, "id", i, "categories"))
        freq = rec.get("frequency")
        count = rec.get("image_count")
        derived = band_from_image_count(int(count)) if count is not None else None
        if freq is not None:
            if freq not in _LVIS_FREQ:
                raise BandConflict(f"category {cid}: unknown frequency code {freq!r}")
            band = _LVIS_FREQ[freq]
            if derived is not None and derived != band:
                raise BandConflict(
                    f"category {cid}: frequency {freq!r} disagrees with image_count {count}"
                )
        elif derived is not None:
            band = derived
        else:
            continue
        if cid in vocab:
            bands[cid] = band
    return vocab.with_bands(bands)


def load_refexp(path) -> list[RefExpression]:
    """Read the normalized referring-expression format (one JSON object per line).

    Required fields: ``image_id``, ``expression``, ``bbox`` as ``[x1, y1, x2, y2]``
    and ``granularity`` (``phrase`` or ``sentence``). Optional ``width`` and
    ``height`` describe the image.
    """
    out = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            for key in REFEXP_FIELDS:
                _require(rec, key, lineno, str(path))
            bbox = rec["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise MalformedBox(f"{path}:{lineno}: bbox must have 4 numbers, got {bbox!r}")
            try:
                box = BBox(*bbox)
            except MalformedBox as exc:
                raise MalformedBox(f"{path}:{lineno}: {exc}") from None
            if rec["granularity"] not in REFEXP_GRANULARITIES:
                raise UnknownGranularity(f"{path}:{lineno}: {rec['granularity']!r}")
            out.append(
                RefExpression(
                    int(rec["image_id"]),
                    str(rec["expression"]),
                    box,
                    rec["granularity"],
                    rec.get("width"),
                    rec.get("height"),
                )
            )
    return out


def dump_index(vocab: CategoryVocab, images: Sequence[ImageAnnotation]) -> str:
    """Canonical JSON serialization, used to check that loading is deterministic."""
    doc = {
        "categories": [[c.id, c.name, c.band] for c in vocab],
        "images": [
            {
                "id": im.image_id,
                "width": im.width,
                "height": im.height,
                "source": im.source,
                "instances": [[inst.category_id, *inst.box.as_list()] for inst in im.instances],
            }
            for im in images
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
