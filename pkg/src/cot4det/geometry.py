"""Axis-aligned bounding boxes in original pixel coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import MalformedBox

__all__ = ["BBox", "area", "iou", "SMALL_AREA"]

# COCO small-object boundary (32 x 32 px).
SMALL_AREA = 1024.0


@dataclass(frozen=True, slots=True)
class BBox:
    """Rectangle ``[x1, y1, x2, y2]`` with origin at the top-left corner.

    Construction rejects non-finite, negative, or degenerate boxes instead
    of clamping them.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        for c in coords:
            if isinstance(c, bool) or not isinstance(c, (int, float)):
                raise MalformedBox(f"non-numeric coordinate in {list(coords)}")
            if not math.isfinite(c):
                raise MalformedBox(f"non-finite coordinate in {list(coords)}")
            if c < 0:
                raise MalformedBox(f"negative coordinate in {list(coords)}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise MalformedBox(f"degenerate box {list(coords)}")
        # normalise ints to float so equality and hashing are type-agnostic
        for name, c in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, float(c))

    @classmethod
    def from_xywh(cls, x, y, w, h) -> BBox:
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def sort_key(self) -> tuple[float, float, float, float]:
        """Left-to-right ordering key: x1, then y1, x2, y2."""
        return (self.x1, self.y1, self.x2, self.y2)

    def within(self, width, height) -> bool:
        return self.x2 <= width and self.y2 <= height

    def overshoot(self, width, height) -> float:
        """Largest distance by which the box extends past the image edge."""
        return max(0.0, self.x2 - width, self.y2 - height)

    def clamp(self, width, height) -> BBox:
        return BBox(self.x1, self.y1, min(self.x2, float(width)), min(self.y2, float(height)))

    def translate(self, dx, dy) -> BBox:
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


def area(b: BBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0.0 for disjoint boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    return min(1.0, inter / union)
