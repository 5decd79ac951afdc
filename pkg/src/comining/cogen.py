"""Pseudo-label co-generation and merging with sparse annotations.

One branch's decoded detections become supervision for the other branch in
three steps: drop anything scoring below ``tau``, run class-agnostic NMS at
``nms_iou``, then drop every survivor that overlaps an annotated box by
more than ``gt_iou``. The result is merged with the annotations into the
label set that supervises the opposite branch.

Everything here works on plain values; predictions are copied in as
numbers, so nothing downstream can push gradients back through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import GtInstance, LabelSet
from .geometry import Detection, boxes_to_array, iou_array, nms_indices

BRANCHES = ("original", "augmented")


class PseudoLabelError(ValueError):
    """A pseudo-label set violates its invariants."""


@dataclass(frozen=True)
class CoGenConfig:
    tau: float = 0.6
    nms_iou: float = 0.5
    gt_iou: float = 0.5

    def __post_init__(self) -> None:
        for name in ("nms_iou", "gt_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"cogen.{name} must lie in [0, 1]")
        # tau above 1 is allowed: it switches pseudo-labelling off entirely
        if self.tau < 0.0:
            raise ValueError("cogen.tau must be >= 0")


@dataclass(frozen=True)
class PseudoLabelSet:
    labels: tuple[Detection, ...]
    source: str
    config: CoGenConfig

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class CompleteLabelSet:
    instances: LabelSet

    @property
    def origins(self) -> tuple[str, ...]:
        return tuple(g.origin for g in self.instances)

    def pseudo(self) -> tuple[GtInstance, ...]:
        return tuple(g for g in self.instances if g.origin != "annotated")

    def __len__(self) -> int:
        return len(self.instances)


def co_generate_indices(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray,
                        cfg: CoGenConfig) -> np.ndarray:
    """Array form of :func:`co_generate`; returns indices of surviving boxes
    in ascending (input) order."""
    idx = np.flatnonzero(np.asarray(scores) >= cfg.tau)
    if len(idx) == 0:
        return idx
    kept = idx[nms_indices(boxes[idx], scores[idx], cfg.nms_iou)]
    if len(gt_boxes):
        overlap = iou_array(boxes[kept], gt_boxes).max(axis=1)
        kept = kept[overlap <= cfg.gt_iou]
    return np.sort(kept)


def co_generate(dets: Sequence[Detection], Y: LabelSet, cfg: CoGenConfig,
                source: str = "original") -> PseudoLabelSet:
    if source not in BRANCHES:
        raise ValueError(f"unknown branch {source!r}")
    if not dets:
        return PseudoLabelSet((), source, cfg)
    boxes = boxes_to_array([d.bbox for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    keep = co_generate_indices(boxes, scores, Y.boxes(), cfg)
    return PseudoLabelSet(tuple(dets[i] for i in keep), source, cfg)


def check_pseudo_labels(pg: PseudoLabelSet, Y: LabelSet, tol: float = 1e-12) -> None:
    cfg = pg.config
    if not pg.labels:
        return
    scores = np.array([d.score for d in pg.labels])
    if (scores < cfg.tau).any():
        raise PseudoLabelError(f"pseudo-label scored below tau={cfg.tau}")
    boxes = boxes_to_array([d.bbox for d in pg.labels])
    pair = iou_array(boxes, boxes)
    np.fill_diagonal(pair, 0.0)
    if (pair > cfg.nms_iou + tol).any():
        raise PseudoLabelError(f"pseudo-labels overlap each other above {cfg.nms_iou}")
    if len(Y) and (iou_array(boxes, Y.boxes()) > cfg.gt_iou + tol).any():
        raise PseudoLabelError(f"pseudo-label overlaps an annotation above {cfg.gt_iou}")


def merge(pg: PseudoLabelSet, Y: LabelSet) -> CompleteLabelSet:
    """``Y`` followed by the pseudo-labels as fresh instances tagged with the
    branch that produced them."""
    check_pseudo_labels(pg, Y)
    next_id = max((g.instance_id for g in Y), default=0) + 1
    extra = tuple(
        GtInstance(next_id + i, Y.image_id, d.class_id, d.bbox, origin=pg.source)
        for i, d in enumerate(pg.labels)
    )
    return CompleteLabelSet(LabelSet(Y.image_id, Y.instances + extra))


def merge_arrays(gt_boxes: np.ndarray, gt_classes: np.ndarray, pseudo_boxes: np.ndarray,
                 pseudo_classes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Array counterpart of :func:`merge` used inside the training step."""
    return (np.concatenate([gt_boxes.reshape(-1, 4), pseudo_boxes.reshape(-1, 4)]),
            np.concatenate([gt_classes, pseudo_classes]).astype(np.int64))


