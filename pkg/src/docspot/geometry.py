"""Rectangle arithmetic, IoU, and greedy non-maximum suppression.

Shared by proposal filtering, result deduplication, and evaluation matching.
All functions are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence


@dataclass(frozen=True)
class BBox:
    """Pixel-space rectangle: top-left corner plus positive extent."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox extent must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def clip(self, width: int, height: int) -> Optional["BBox"]:
        """Intersect with the page rectangle (0, 0, width, height).

        Returns None when nothing remains.
        """
        x1 = max(self.x, 0)
        y1 = max(self.y, 0)
        x2 = min(self.x2, width)
        y2 = min(self.y2, height)
        if x2 <= x1 or y2 <= y1:
            return None
        return BBox(x1, y1, x2 - x1, y2 - y1)

    def to_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "BBox":
        if len(values) != 4:
            raise ValueError(f"bbox needs 4 values [x, y, w, h], got {len(values)}")
        return cls(int(values[0]), int(values[1]), int(values[2]), int(values[3]))


@dataclass(frozen=True)
class ScoredBox:
    """A box with a detector confidence in [0, 1]."""

    bbox: BBox
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")


def intersection_area(a: BBox, b: BBox) -> int:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; exact integer areas, one final division.

    Integer arithmetic keeps iou(a, a) == 1.0 exact.
    """
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


def _nms_sort_key(sb: ScoredBox) -> tuple:
    # Descending score; ties resolved by geometry so output order is
    # deterministic regardless of input order.
    b = sb.bbox
    return (-sb.score, b.x, b.y, b.w, b.h)


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy suppression: keep the best remaining box, drop overlapping ones.

    A box is dropped iff its IoU with an already-kept box strictly exceeds
    the threshold, so threshold 1.0 keeps everything. Output is in
    descending-score order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    kept: list[ScoredBox] = []
    for candidate in sorted(boxes, key=_nms_sort_key):
        if all(iou(candidate.bbox, k.bbox) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept
