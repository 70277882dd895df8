"""Points and axis-aligned rectangles.

All rectangles are closed: a point lying on an edge is inside.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass


@dataclass(frozen=True, slots=True)
class Point:
    x: float
    y: float
    oid: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite coordinates for oid {self.oid}: ({self.x}, {self.y})")


_RectBase = namedtuple("_RectBase", "x_min y_min x_max y_max")


class Rect(_RectBase):
    """Closed axis-aligned rectangle ``(x_min, y_min, x_max, y_max)``."""

    __slots__ = ()

    def __new__(cls, x_min: float, y_min: float, x_max: float, y_max: float) -> "Rect":
        x_min, y_min, x_max, y_max = float(x_min), float(y_min), float(x_max), float(y_max)
        if not all(math.isfinite(v) for v in (x_min, y_min, x_max, y_max)):
            raise ValueError(f"non-finite rectangle {(x_min, y_min, x_max, y_max)}")
        if x_min > x_max or y_min > y_max:
            raise ValueError(f"inverted rectangle {(x_min, y_min, x_max, y_max)}")
        return super().__new__(cls, x_min, y_min, x_max, y_max)

    @classmethod
    def of_point(cls, x: float, y: float) -> "Rect":
        return cls(x, y, x, y)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def intersects(self, other: "Rect") -> bool:
        return not (
            other.x_min > self.x_max
            or other.x_max < self.x_min
            or other.y_min > self.y_max
            or other.y_max < self.y_min
        )

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def contains(self, other: "Rect") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )

    def union(self, other: "Rect") -> "Rect":
        return Rect(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )

    def intersection(self, other: "Rect") -> "Rect | None":
        if not self.intersects(other):
            return None
        return Rect(
            max(self.x_min, other.x_min),
            max(self.y_min, other.y_min),
            min(self.x_max, other.x_max),
            min(self.y_max, other.y_max),
        )


def bounding_rect(points) -> Rect:
    """MBR of an iterable of points; raises on empty input."""
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    if not xs:
        raise ValueError("cannot bound an empty point set")
    return Rect(min(xs), min(ys), max(xs), max(ys))
