"""Box and sample value types plus exact box arithmetic.

Coordinates are integer pixels with the origin at the top-left. Area is
``(x2 - x1) * (y2 - y1)``; there is no +1 pixel-inclusive convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, Optional

if TYPE_CHECKING:
    from ssgrpo.synth import Scene


@dataclass(frozen=True, order=True)
class BBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if isinstance(v, bool) or not isinstance(v, int):
                raise TypeError(f"box coordinates must be int, got {v!r}")
            if v < 0:
                raise ValueError(f"box coordinates must be non-negative: {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {self}")

    @classmethod
    def of(cls, coords) -> "BBox":
        x1, y1, x2, y2 = (int(c) for c in coords)
        return cls(x1, y1, x2, y2)

    def __iter__(self) -> Iterator[int]:
        return iter((self.x1, self.y1, self.x2, self.y2))

    def to_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def shift(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scale(self, k: int) -> "BBox":
        return BBox(self.x1 * k, self.y1 * k, self.x2 * k, self.y2 * k)

    def within(self, width: int, height: int) -> bool:
        return self.x2 <= width and self.y2 <= height


@dataclass(frozen=True)
class ImageRef:
    """Either a symbolic synthetic scene or a path to an image on disk."""

    kind: str
    scene: Optional["Scene"] = None
    path: Optional[str] = None

    SYNTHETIC = "synthetic-scene"
    FILE = "file-path"

    def __post_init__(self):
        if self.kind == self.SYNTHETIC:
            if self.scene is None or self.path is not None:
                raise ValueError("synthetic-scene image needs a scene and no path")
        elif self.kind == self.FILE:
            if self.path is None or self.scene is not None:
                raise ValueError("file-path image needs a path and no scene")
        else:
            raise ValueError(f"unknown image kind {self.kind!r}")

    @classmethod
    def from_scene(cls, scene: "Scene") -> "ImageRef":
        return cls(cls.SYNTHETIC, scene=scene)

    @classmethod
    def from_path(cls, path: str) -> "ImageRef":
        return cls(cls.FILE, path=path)


@dataclass(frozen=True)
class GroundingSample:
    id: str
    image: ImageRef
    phrase: str
    gt_box: BBox
    width: int
    height: int

    def __post_init__(self):
        if not self.phrase:
            raise ValueError(f"sample {self.id!r}: phrase must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sample {self.id!r}: image extent must be positive")
        if not self.gt_box.within(self.width, self.height):
            raise ValueError(f"sample {self.id!r}: gt box {self.gt_box} outside image")


def box_area(b: BBox) -> int:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def box_intersection(a: BBox, b: BBox) -> Optional[BBox]:
    """Overlap rectangle of two boxes, or None if they share no area."""
    x1, y1 = max(a.x1, b.x1), max(a.y1, b.y1)
    x2, y2 = min(a.x2, b.x2), min(a.y2, b.y2)
    if x1 >= x2 or y1 >= y2:
        return None
    return BBox(x1, y1, x2, y2)


def intersection_area(a: BBox, b: BBox) -> int:
    inter = box_intersection(a, b)
    return 0 if inter is None else box_area(inter)


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union. Zero when the union has no area."""
    inter = intersection_area(a, b)
    union = box_area(a) + box_area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union
