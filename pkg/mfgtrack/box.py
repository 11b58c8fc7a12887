import math
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np

from .errors import BoxError


@dataclass(frozen=True, eq=True)
class BoundingBox:
    # Top-left corner in pixels
    x: float
    y: float
    # Extent in pixels
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise BoxError(f"Box must have positive extent, got w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise BoxError(f"Box has non-finite coordinates: {self.as_tuple()}")

    def __repr__(self):
        return f"[Box {self.x:.1f},{self.y:.1f},{self.w:.1f},{self.h:.1f}]"

    @staticmethod
    def from_array(row: Iterable[float]):
        x, y, w, h = (float(v) for v in row)
        return BoundingBox(x, y, w, h)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float):
        return BoundingBox(x1, y1, x2 - x1, y2 - y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def to_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    def iou(self, other: "BoundingBox") -> float:
        return float(overlap_ratio(self.to_array(), other.to_array())[0])

    def clip(self, image_size: Tuple[int, int]) -> "BoundingBox":
        return BoundingBox.from_array(clip_boxes(self.to_array(), image_size)[0])

    def inside(self, image_size: Tuple[int, int]) -> bool:
        height, width = image_size
        return (
            self.x >= 0
            and self.y >= 0
            and self.x + self.w <= width + 1e-6
            and self.y + self.h <= height + 1e-6
        )


def as_box_array(boxes) -> np.ndarray:
    """Coerces a box, a list of boxes, or an array of rows into an (n, 4) float array."""
    if isinstance(boxes, BoundingBox):
        return boxes.to_array()[None]
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], BoundingBox):
            arr = np.stack([box.to_array() for box in boxes])
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise BoxError(f"Expected boxes as rows of x,y,w,h, got shape {arr.shape}")
    return arr


def to_boxes(arr: np.ndarray) -> List[BoundingBox]:
    return [BoundingBox.from_array(row) for row in as_box_array(arr)]


def overlap_ratio(a, b) -> np.ndarray:
    """Intersection over union between matching rows of `a` and `b`.

    Either side may be a single box, which is broadcast against the other.

    Returns:
        np.ndarray: IoU per row, in [0, 1].
    """
    a = as_box_array(a)
    b = as_box_array(b)
    left = np.maximum(a[:, 0], b[:, 0])
    right = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2])
    top = np.maximum(a[:, 1], b[:, 1])
    bottom = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3])
    intersect = np.maximum(0, right - left) * np.maximum(0, bottom - top)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - intersect
    return np.clip(intersect / np.maximum(union, 1e-12), 0, 1)


def center_error(a, b) -> np.ndarray:
    """Euclidean distance in pixels between the centers of matching rows."""
    a = as_box_array(a)
    b = as_box_array(b)
    ca = a[:, :2] + a[:, 2:] / 2
    cb = b[:, :2] + b[:, 2:] / 2
    return np.sqrt(((ca - cb) ** 2).sum(axis=1))


def clip_boxes(boxes, image_size: Tuple[int, int], min_size: float = 1.0) -> np.ndarray:
    """Shrinks and shifts boxes so they lie inside an image of (height, width)."""
    height, width = image_size
    arr = as_box_array(boxes).copy()
    arr[:, 2] = np.clip(arr[:, 2], min_size, width)
    arr[:, 3] = np.clip(arr[:, 3], min_size, height)
    arr[:, 0] = np.clip(arr[:, 0], 0, width - arr[:, 2])
    arr[:, 1] = np.clip(arr[:, 1], 0, height - arr[:, 3])
    return arr
