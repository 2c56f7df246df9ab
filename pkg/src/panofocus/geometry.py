"""
Box arithmetic
==============

Axis-aligned boxes in (left, top, width, height) form with real-valued
pixel coordinates. Corner form (x1, y1, x2, y2) is derived on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional


class GeometryError(ValueError):
    """Raised for invalid boxes or impossible geometric requests."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float
    score: Optional[float] = None

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"box field {name!r} must be finite")
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box width/height must be positive, got w={self.w}, h={self.h}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise GeometryError(f"box score must lie in [0, 1], got {self.score}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def with_score(self, score: Optional[float]) -> "Box":
        return Box(self.x, self.y, self.w, self.h, score)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h, self.score)

    def contains(self, other: "Box", tol: float = 1e-9) -> bool:
        """True if `other` lies inside this box (edges may coincide)."""
        return (
            other.x >= self.x - tol
            and other.y >= self.y - tol
            and other.x2 <= self.x2 + tol
            and other.y2 <= self.y2 + tol
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float, score: Optional[float] = None) -> "Box":
        return cls(x1, y1, x2 - x1, y2 - y1, score)


@dataclass(frozen=True)
class FrameSpec:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"frame size must be positive, got {self.width}x{self.height}")

    def as_box(self) -> Box:
        return Box(0.0, 0.0, self.width, self.height)


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when they are disjoint."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def union_box(a: Box, b: Box) -> Box:
    """Smallest box enclosing both inputs. The result carries no score."""
    return Box.from_corners(min(a.x, b.x), min(a.y, b.y), max(a.x2, b.x2), max(a.y2, b.y2))


def overlaps(a: Box, b: Box) -> bool:
    """Strictly positive intersection area. Touching edges do not count."""
    return intersection_area(a, b) > 0.0


def clip_box(b: Box, frame: FrameSpec) -> Box:
    """Intersect `b` with the frame rectangle [0, width] x [0, height].

    Raises:
        GeometryError: if the box has no positive-area overlap with the frame.
    """
    if b.x >= 0 and b.y >= 0 and b.x2 <= frame.width and b.y2 <= frame.height:
        return b
    x1 = max(b.x, 0.0)
    y1 = max(b.y, 0.0)
    x2 = min(b.x2, float(frame.width))
    y2 = min(b.y2, float(frame.height))
    if x2 <= x1 or y2 <= y1:
        raise GeometryError(f"box {b.coords()} lies outside the {frame.width}x{frame.height} frame")
    return Box.from_corners(x1, y1, x2, y2, b.score)
