from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

__all__ = (
    'ImageSide',
    'BoundingBox',
    'Scene',
    'BoxAttention',
    'iou',
    'iou_matrix',
)

_PROB_TOLERANCE = 1e-9


class ImageSide(Enum):
    LEFT = 'left'
    RIGHT = 'right'

    @property
    def other(self) -> ImageSide:
        return ImageSide.RIGHT if self is ImageSide.LEFT else ImageSide.LEFT


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates on one of the two images."""

    x1: float
    y1: float
    x2: float
    y2: float
    image: ImageSide

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) and c >= 0 for c in coords):
            raise ValueError(f'box coordinates must be finite and nonnegative, got {coords}')
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f'box must satisfy x1 < x2 and y1 < y2, got {coords}')

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @classmethod
    def from_coords(cls, coords: Sequence[float], image: ImageSide | str) -> BoundingBox:
        x1, y1, x2, y2 = (float(c) for c in coords)
        return cls(x1, y1, x2, y2, ImageSide(image))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union. Boxes on different images never overlap."""
    if a.image is not b.image:
        return 0.0
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def _coords_array(boxes: Sequence[BoundingBox]) -> NDArray[np.float64]:
    return np.asarray([box.coords for box in boxes], dtype=np.float64).reshape(-1, 4)


def iou_matrix(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> NDArray[np.float64]:
    """Pairwise IOU, shape (len(boxes_a), len(boxes_b)). Cross-image pairs are 0."""
    a = _coords_array(boxes_a)[:, None, :]
    b = _coords_array(boxes_b)[None, :, :]
    w = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    h = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = w * h
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    out = inter / (area_a + area_b - inter)
    side_a = np.asarray([box.image is ImageSide.LEFT for box in boxes_a], dtype=np.int8)
    side_b = np.asarray([box.image is ImageSide.LEFT for box in boxes_b], dtype=np.int8)
    same_image = side_a[:, None] == side_b[None, :]
    return np.where(same_image, out, 0.0).reshape(len(boxes_a), len(boxes_b))


@dataclass(frozen=True)
class Scene:
    """Proposals of one two-image example. Every BoxAttention indexes into `proposals` in this order."""

    example_id: str
    proposals: tuple[BoundingBox, ...]

    def __len__(self) -> int:
        return len(self.proposals)

    @cached_property
    def sides(self) -> tuple[ImageSide, ...]:
        return tuple(box.image for box in self.proposals)

    def image_mask(self, side: ImageSide) -> NDArray[np.float64]:
        """1.0 for proposals on side, 0.0 elsewhere."""
        return np.asarray([s is side for s in self.sides], dtype=np.float64)

    def indices(self, side: ImageSide | None = None) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.sides) if side is None or s is side)

    @cached_property
    def self_iou(self) -> NDArray[np.float64]:
        return iou_matrix(self.proposals, self.proposals)


@dataclass(frozen=True, eq=False)
class BoxAttention:
    """Per-proposal probability of belonging to a module's output set."""

    probs: NDArray[np.float64]

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(probs)) or np.any(probs < -_PROB_TOLERANCE) or np.any(probs > 1 + _PROB_TOLERANCE):
            raise ValueError('box attention entries must lie in [0, 1]')
        probs = np.clip(probs, 0.0, 1.0)
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)

    @classmethod
    def of(cls, values: ArrayLike) -> BoxAttention:
        return cls(np.asarray(values, dtype=np.float64))

    @classmethod
    def zeros(cls, size: int) -> BoxAttention:
        return cls(np.zeros(size))

    @classmethod
    def ones(cls, size: int) -> BoxAttention:
        return cls(np.ones(size))

    def __len__(self) -> int:
        return self.probs.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BoxAttention):
            return NotImplemented
        return self.probs.shape == other.probs.shape and bool(np.array_equal(self.probs, other.probs))

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())

    def selected(self, threshold: float = 0.5) -> NDArray[np.bool_]:
        """Mask of proposals with probability strictly above threshold."""
        return self.probs > threshold

    def total(self) -> float:
        return float(self.probs.sum())

    def tolist(self) -> list[float]:
        return [float(p) for p in self.probs]
