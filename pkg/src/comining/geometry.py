"""Axis-aligned box arithmetic: area, IoU, IoU matrices and greedy NMS.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)``. The
array helpers operate on ``(N, 4)`` float arrays in the same layout and are
what the hot training paths use; the object-level functions wrap them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"box corners out of order: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(float(x), float(y), float(x + w), float(y + h))

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an ``(N, 4)`` float64 array (``(0, 4)`` when empty)."""
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def area(b: BBox) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two ``(N, 4)`` / ``(M, 4)`` arrays, shape ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def iou_matrix(A: Sequence[BBox], B: Sequence[BBox]) -> np.ndarray:
    return iou_array(boxes_to_array(A), boxes_to_array(B))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy class-agnostic NMS; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box is strictly
    greater than ``iou_thr``. Equal scores keep input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        overlap = iou_array(boxes[i:i + 1], boxes[rest])[0]
        order = rest[overlap <= iou_thr]
    return np.asarray(keep, dtype=np.intp)


def nms(dets: Sequence[Detection], iou_thr: float) -> list[Detection]:
    if not dets:
        return []
    keep = nms_indices(
        boxes_to_array([d.bbox for d in dets]),
        np.array([d.score for d in dets]),
        iou_thr,
    )
    return [dets[i] for i in keep]
