"""COCO-style average precision.

Matching is greedy in descending score order: each detection takes the
still-unmatched ground-truth box of its category with the highest IoU at or
above the threshold (lowest index on ties). AP is the mean of the
interpolated precision envelope sampled at 101 recall points, averaged over
categories and then over IoU thresholds 0.50:0.05:0.95.

Size buckets follow the COCO convention: ground truth outside the bucket's
area range is ignored, detections matched to ignored boxes are dropped, and
unmatched detections outside the range are dropped as well.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import LabelSet, SparseDataset
from .geometry import Detection, boxes_to_array, box_areas, iou_array

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# scene-unit analogues of COCO's 32^2 / 96^2 pixel bounds
DEFAULT_AREA_BOUNDS = (4.0, 16.0)


@dataclass
class Metrics:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    per_category: dict[int, dict[str, float | None]] = field(default_factory=dict)

    SUMMARY_FIELDS = ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l")

    def summary(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in self.SUMMARY_FIELDS}

    def to_json(self) -> dict:
        return {**self.summary(),
                "per_category": {str(k): v for k, v in sorted(self.per_category.items())}}

    def write(self, out_dir: str | os.PathLike, category_names: Sequence[str] | None = None) -> None:
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
        with open(os.path.join(out_dir, "per_category.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "name", "ap", "ap50", "ap75"])
            for cid, row in sorted(self.per_category.items()):
                name = category_names[cid] if category_names else ""
                w.writerow([cid, name] + ["" if row[k] is None else repr(row[k])
                                          for k in ("ap", "ap50", "ap75")])


def match_greedy(dets: Sequence[Detection], gts: Sequence, iou_thr: float,
                 gt_ignore: Sequence[bool] | None = None) -> list[bool]:
    """TP/FP flag per detection; ``dets`` must already be sorted by score.

    ``gts`` may be :class:`~comining.dataset.GtInstance` or anything with a
    ``bbox`` attribute. Category filtering is the caller's job.
    """
    boxes_d = boxes_to_array([d.bbox for d in dets])
    boxes_g = boxes_to_array([g.bbox for g in gts])
    ignore = np.zeros(len(gts), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    matched, _ = _match(iou_array(boxes_d, boxes_g), ignore, iou_thr)
    return [m >= 0 and not ignore[m] for m in matched]


def _match(ious: np.ndarray, gt_ignore: np.ndarray, iou_thr: float) -> tuple[np.ndarray, np.ndarray]:
    """Core matcher. Returns per-detection matched gt index (-1 if none) and
    the gt-taken mask. Non-ignored gts are preferred over ignored ones."""
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, bool)
    out = np.full(n_det, -1, dtype=np.int64)
    order = np.argsort(gt_ignore, kind="stable")
    for d in range(n_det):
        best, m = iou_thr, -1
        for g in order:
            if taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            v = ious[d, g]
            if v < iou_thr or (m > -1 and v <= best):
                continue
            best, m = v, g
        if m > -1:
            taken[m] = True
            out[d] = m
    return out, taken


def average_precision(tp: Sequence[bool], scores: Sequence[float], total_gt: int) -> float | None:
    """101-point interpolated AP over detections pooled across images."""
    tp = np.asarray(tp, dtype=bool)
    if total_gt == 0:
        return 0.0 if len(tp) else None
    if len(tp) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / total_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(dets: Mapping[int, Sequence[Detection]],
             gt: SparseDataset | Mapping[int, LabelSet],
             num_classes: int | None = None,
             area_bounds: tuple[float, float] = DEFAULT_AREA_BOUNDS,
             max_dets: int | None = 100,
             iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> Metrics:
    """Evaluate per-image detections against complete ground truth."""
    if isinstance(gt, SparseDataset):
        num_classes = gt.num_classes if num_classes is None else num_classes
        gt = {iid: gt.labels(iid) for iid in gt.image_ids}
    if num_classes is None:
        raise ValueError("num_classes is required when gt is a plain mapping")
    thrs = [float(t) for t in iou_thresholds]
    ranges = {
        "all": (0.0, np.inf),
        "s": (0.0, area_bounds[0]),
        "m": (area_bounds[0], area_bounds[1]),
        "l": (area_bounds[1], np.inf),
    }

    # per (image, category): sorted det arrays and gt arrays
    cells = []
    for iid, labels in gt.items():
        image_dets = sorted(dets.get(iid, ()), key=lambda d: -d.score)
        if max_dets is not None:
            image_dets = image_dets[:max_dets]
        g_boxes = labels.boxes()
        g_cls = labels.classes()
        d_boxes = boxes_to_array([d.bbox for d in image_dets])
        d_scores = np.array([d.score for d in image_dets], dtype=np.float64)
        d_cls = np.array([d.class_id for d in image_dets], dtype=np.int64)
        for c in range(num_classes):
            gb = g_boxes[g_cls == c] if len(g_cls) else np.zeros((0, 4))
            db = d_boxes[d_cls == c] if len(d_cls) else np.zeros((0, 4))
            ds = d_scores[d_cls == c] if len(d_cls) else np.zeros(0)
            if len(gb) == 0 and len(db) == 0:
                continue
            cells.append((c, db, ds, box_areas(db), box_areas(gb), iou_array(db, gb)))

    table: dict[tuple[str, int, float], float | None] = {}
    for rname, (lo, hi) in ranges.items():
        for c in range(num_classes):
            mine = [cell for cell in cells if cell[0] == c]
            for t in thrs:
                flags, scores, total = [], [], 0
                for _, db, ds, d_area, g_area, ious in mine:
                    g_ign = (g_area < lo) | (g_area >= hi)
                    total += int((~g_ign).sum())
                    matched, _ = _match(ious, g_ign, t)
                    for d in range(len(db)):
                        m = matched[d]
                        if m >= 0:
                            if g_ign[m]:
                                continue
                            flags.append(True)
                        else:
                            if d_area[d] < lo or d_area[d] >= hi:
                                continue
                            flags.append(False)
                        scores.append(ds[d])
                table[rname, c, t] = average_precision(flags, scores, total)

    def bucket(rname: str, ts: Sequence[float]) -> float | None:
        per_t = [_mean(table[rname, c, t] for c in range(num_classes)) for t in ts]
        return _mean(per_t)

    t50 = min(thrs, key=lambda t: abs(t - 0.5))
    t75 = min(thrs, key=lambda t: abs(t - 0.75))
    per_category = {
        c: {
            "ap": _mean(table["all", c, t] for t in thrs),
            "ap50": table["all", c, t50],
            "ap75": table["all", c, t75],
        }
        for c in range(num_classes)
    }
    return Metrics(
        ap=bucket("all", thrs),
        ap50=bucket("all", [t50]),
        ap75=bucket("all", [t75]),
        ap_s=bucket("s", thrs),
        ap_m=bucket("m", thrs),
        ap_l=bucket("l", thrs),
        per_category=per_category,
    )
