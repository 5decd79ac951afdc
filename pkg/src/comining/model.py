"""A small dense anchor-based detector with hand-written gradients.

The network is a per-cell two-layer map: a backbone (linear channel mixer
followed by a rectifier) and a head (linear ``D -> A * (K + 4)``). With
``context = 0`` the mixer sees only the cell's own ``C`` channels; with
``context = r`` it sees the zero-padded ``(2r + 1) x (2r + 1)`` neighbourhood
flattened row-major into ``(2r + 1)^2 * C`` inputs. For every cell and anchor
shape the head emits ``K`` classification logits followed by four box
offsets ``(dx, dy, dw, dh)``.

Anchor order is cell-major, shape-minor: anchor ``(i * W + j) * A + s`` sits
at cell row ``i``, column ``j`` with shape ``s``. Every flattened prediction
array in this module uses that order.

Assignments are integer arrays with one entry per anchor: a non-negative
value is the index of the matched ground-truth box, :data:`NEGATIVE` marks
background and :data:`IGNORE` marks anchors that take no part in the loss.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .geometry import BBox, Detection, box_areas, iou_array, nms_indices

NEGATIVE = -1
IGNORE = -2

# exp() guard for predicted log-scale offsets at inference time
MAX_LOG_SCALE = math.log(1000.0 / 16.0)

CHECKPOINT_MAGIC = 0x4B434D43  # b"CMCK" read as little-endian int32
CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    """Dimension mismatch between parameters, inputs and anchors."""


# ----------------------------------------------------------------- anchors


@dataclass(frozen=True)
class AnchorGrid:
    grid_h: int
    grid_w: int
    shapes: tuple[tuple[float, float], ...]
    boxes: np.ndarray  # (grid_h * grid_w * A, 4)

    @property
    def num_shapes(self) -> int:
        return len(self.shapes)

    def __len__(self) -> int:
        return len(self.boxes)

    def bbox(self, index: int) -> BBox:
        return BBox(*map(float, self.boxes[index]))


def build_anchors(grid_h: int, grid_w: int, shapes: Sequence[tuple[float, float]]) -> AnchorGrid:
    shapes = tuple((float(w), float(h)) for w, h in shapes)
    if not shapes:
        raise ModelConfigError("at least one anchor shape is required")
    wh = np.array(shapes)
    cy, cx = np.meshgrid(np.arange(grid_h) + 0.5, np.arange(grid_w) + 0.5, indexing="ij")
    centers = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)
    lo = centers - wh[None] / 2
    hi = centers + wh[None] / 2
    boxes = np.concatenate([lo, hi], axis=-1).reshape(-1, 4)
    return AnchorGrid(grid_h, grid_w, shapes, boxes)


# ---------------------------------------------------------------- network


@dataclass
class ModelParams:
    w_b: np.ndarray  # (D, (2 * context + 1)**2 * C)
    b_b: np.ndarray  # (D,)
    w_h: np.ndarray  # (A * (K + 4), D)
    b_h: np.ndarray  # (A * (K + 4),)
    num_classes: int
    num_anchors: int
    context: int = 0

    FIELDS = ("w_b", "b_b", "w_h", "b_h")

    @property
    def window(self) -> int:
        return (2 * self.context + 1) ** 2

    @property
    def channels(self) -> int:
        return self.w_b.shape[1] // self.window

    @property
    def hidden(self) -> int:
        return self.w_b.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        return ModelParams(*arrays, num_classes=self.num_classes, num_anchors=self.num_anchors,
                           context=self.context)

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "ModelParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def validate(self) -> None:
        d, c = self.w_b.shape
        out = self.num_anchors * (self.num_classes + 4)
        if c % self.window or self.b_b.shape != (d,) or self.w_h.shape != (out, d) or self.b_h.shape != (out,):
            raise ModelConfigError(
                f"inconsistent parameter shapes: w_b {self.w_b.shape}, b_b {self.b_b.shape}, "
                f"w_h {self.w_h.shape}, b_h {self.b_h.shape} for K={self.num_classes}, "
                f"A={self.num_anchors}"
            )


def init_params(channels: int, hidden: int, num_classes: int, num_anchors: int,
                rng: np.random.Generator, prior: float = 0.01,
                head_std: float = 0.01, context: int = 0) -> ModelParams:
    """Backbone He-normal, head ``Normal(0, head_std)``, biases zero except the
    classification bias, which starts every anchor at foreground probability
    ``prior``."""
    fan_in = (2 * context + 1) ** 2 * channels
    w_b = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(hidden, fan_in))
    b_b = np.zeros(hidden)
    out = num_anchors * (num_classes + 4)
    w_h = rng.normal(0.0, head_std, size=(out, hidden))
    b_h = np.zeros(out).reshape(num_anchors, num_classes + 4)
    b_h[:, :num_classes] = -math.log((1.0 - prior) / prior)
    return ModelParams(w_b, b_b, w_h, b_h.reshape(-1), num_classes, num_anchors, context)


@dataclass(frozen=True)
class DensePrediction:
    cls_logits: np.ndarray  # (..., H, W, A, K)
    reg_offsets: np.ndarray  # (..., H, W, A, 4)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-anchor views ``(N, K)`` and ``(N, 4)`` for a single image."""
        k = self.cls_logits.shape[-1]
        return self.cls_logits.reshape(-1, k), self.reg_offsets.reshape(-1, 4)


def _check_input(p: ModelParams, fm: np.ndarray) -> None:
    if fm.ndim < 3 or fm.shape[-1] != p.channels:
        raise ModelConfigError(
            f"feature map of shape {fm.shape} does not match model channels {p.channels}")


def neighbourhoods(fm: np.ndarray, context: int) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., H, W, (2r+1)^2 * C)`` zero-padded windows."""
    if context == 0:
        return fm
    r = context
    h, w = fm.shape[-3], fm.shape[-2]
    pad = [(0, 0)] * (fm.ndim - 3) + [(r, r), (r, r), (0, 0)]
    padded = np.pad(fm, pad)
    parts = [padded[..., dy:dy + h, dx:dx + w, :]
             for dy in range(2 * r + 1) for dx in range(2 * r + 1)]
    return np.concatenate(parts, axis=-1)


def forward(p: ModelParams, fm: np.ndarray) -> DensePrediction:
    """Run the network on a ``(..., H, W, C)`` feature map."""
    _check_input(p, fm)
    lead = fm.shape[:-1]
    x = neighbourhoods(fm, p.context).reshape(-1, p.w_b.shape[1])
    h = np.maximum(x @ p.w_b.T + p.b_b, 0.0)
    out = (h @ p.w_h.T + p.b_h).reshape(*lead, p.num_anchors, p.num_classes + 4)
    k = p.num_classes
    return DensePrediction(out[..., :k], out[..., k:])


def backward(p: ModelParams, fm: np.ndarray, grad_cls: np.ndarray,
             grad_reg: np.ndarray) -> ModelParams:
    """Parameter gradients given gradients at the dense outputs.

    ``grad_cls`` and ``grad_reg`` must have the shapes of the corresponding
    :class:`DensePrediction` fields for ``fm``. The rectifier uses
    sub-gradient 0 at 0.
    """
    _check_input(p, fm)
    x = neighbourhoods(fm, p.context).reshape(-1, p.w_b.shape[1])
    z = x @ p.w_b.T + p.b_b
    h = np.maximum(z, 0.0)
    g = np.concatenate([grad_cls, grad_reg], axis=-1).reshape(x.shape[0], -1)
    d_wh = g.T @ h
    d_bh = g.sum(axis=0)
    dz = (g @ p.w_h) * (z > 0.0)
    d_wb = dz.T @ x
    d_bb = dz.sum(axis=0)
    return p.with_arrays([d_wb, d_bb, d_wh, d_bh])


def sgd_step(p: ModelParams, grads: ModelParams, lr: float, momentum: float,
             velocity: ModelParams | None = None) -> tuple[ModelParams, ModelParams]:
    """Momentum SGD: ``v <- momentum * v + g``; ``w <- w - lr * v``.

    Returns the updated parameters and velocity; inputs are left untouched.
    """
    if velocity is None:
        velocity = p.zeros_like()
    new_v = [momentum * v + g for v, g in zip(velocity.arrays(), grads.arrays())]
    new_w = [w - lr * v for w, v in zip(p.arrays(), new_v)]
    return p.with_arrays(new_w), p.with_arrays(new_v)


# -------------------------------------------------------------- box coding


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    dx = ((gts[:, 0] + gts[:, 2]) - (anchors[:, 0] + anchors[:, 2])) / (2.0 * aw)
    dy = ((gts[:, 1] + gts[:, 3]) - (anchors[:, 1] + anchors[:, 3])) / (2.0 * ah)
    return np.stack([dx, dy, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray,
                 bounds: tuple[float, float] | None = None,
                 max_log_scale: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; ``bounds=(width, height)`` clips."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = (anchors[:, 0] + anchors[:, 2]) / 2 + offsets[:, 0] * aw
    cy = (anchors[:, 1] + anchors[:, 3]) / 2 + offsets[:, 1] * ah
    dw, dh = offsets[:, 2], offsets[:, 3]
    if max_log_scale is not None:
        dw = np.minimum(dw, max_log_scale)
        dh = np.minimum(dh, max_log_scale)
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if bounds is not None:
        np.clip(out[:, 0::2], 0.0, bounds[0], out=out[:, 0::2])
        np.clip(out[:, 1::2], 0.0, bounds[1], out=out[:, 1::2])
    return out


def encode(anchor: BBox, gt: BBox) -> tuple[float, float, float, float]:
    if anchor.width <= 0 or anchor.height <= 0:
        raise ValueError(f"degenerate anchor {anchor}")
    if gt.width <= 0 or gt.height <= 0:
        raise ValueError(f"degenerate ground-truth box {gt}")
    out = encode_boxes(np.array([anchor.as_tuple()]), np.array([gt.as_tuple()]))[0]
    return tuple(float(v) for v in out)


def decode(anchor: BBox, offsets: Sequence[float],
           bounds: tuple[float, float] | None = None) -> BBox:
    off = np.asarray(offsets, dtype=np.float64).reshape(1, 4)
    if not np.isfinite(off).all():
        raise ValueError(f"non-finite offsets {tuple(offsets)}")
    out = decode_boxes(np.array([anchor.as_tuple()]), off, bounds)[0]
    return BBox(*map(float, out))


# -------------------------------------------------------------- assignment


def assign(anchors: np.ndarray, gt_boxes: np.ndarray, pos_thr: float = 0.5,
           neg_thr: float = 0.4) -> np.ndarray:
    """IoU-based anchor labelling.

    Max IoU ``>= pos_thr`` gives the argmax box (lowest index on ties), below
    ``neg_thr`` gives :data:`NEGATIVE`, anything between is :data:`IGNORE`.
    Each ground-truth box then claims its single best anchor (lowest anchor
    index on ties) so no box goes unmatched; an anchor already claimed this
    way by an earlier box keeps its first owner.
    """
    if pos_thr < neg_thr:
        raise ValueError(f"pos_thr {pos_thr} < neg_thr {neg_thr}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    if len(gt_boxes) == 0:
        return np.full(n, NEGATIVE, dtype=np.int64)
    ious = iou_array(anchors, gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best]
    out = np.full(n, IGNORE, dtype=np.int64)
    out[best_iou < neg_thr] = NEGATIVE
    pos = best_iou >= pos_thr
    out[pos] = best[pos]
    claimed = set()
    for g, a in enumerate(ious.argmax(axis=0)):
        if ious[a, g] > 0.0 and a not in claimed:
            out[a] = g
            claimed.add(int(a))
    return out


# ------------------------------------------------------------------ losses


def focal_loss(cls_logits: np.ndarray, asg: np.ndarray, gt_classes: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> tuple[float, np.ndarray]:
    """Sigmoid focal loss summed over anchors and classes, divided by the
    number of positive anchors (at least 1). Returns ``(loss, dloss/dlogits)``
    with the gradient shaped like ``cls_logits``.
    """
    if not 0.0 < alpha <= 1.0 or gamma < 0.0:
        raise ValueError(f"invalid focal parameters alpha={alpha}, gamma={gamma}")
    shape = cls_logits.shape
    x = cls_logits.reshape(len(asg), -1)
    pos = asg >= 0
    valid = (asg != IGNORE)[:, None]
    t = np.zeros_like(x)
    t[np.flatnonzero(pos), np.asarray(gt_classes)[asg[pos]]] = 1.0
    norm = max(1.0, float(pos.sum()))

    p = expit(x)
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)
    q = expit(-x)
    qg = q ** gamma
    pg = p ** gamma
    loss_pos = -alpha * qg * log_p
    loss_neg = -(1.0 - alpha) * pg * log_q
    loss = np.where(t > 0, loss_pos, loss_neg) * valid
    grad_pos = alpha * qg * (gamma * p * log_p - q)
    grad_neg = (1.0 - alpha) * pg * (p - gamma * q * log_q)
    grad = np.where(t > 0, grad_pos, grad_neg) * valid / norm
    return float(loss.sum() / norm), grad.reshape(shape)


def smooth_l1_loss(reg_offsets: np.ndarray, asg: np.ndarray, anchors: np.ndarray,
                   gt_boxes: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    shape = reg_offsets.shape
    r = reg_offsets.reshape(-1, 4)
    grad = np.zeros_like(r)
    pos = np.flatnonzero(asg >= 0)
    if len(pos) == 0:
        return 0.0, grad.reshape(shape)
    norm = max(1.0, float(len(pos)))
    target = encode_boxes(anchors[pos], np.asarray(gt_boxes)[asg[pos]])
    d = r[pos] - target
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).sum() / norm
    grad[pos] = np.where(small, d / beta, np.sign(d)) / norm
    return float(loss), grad.reshape(shape)


def iou_reg_loss(reg_offsets: np.ndarray, asg: np.ndarray, anchors: np.ndarray,
                 gt_boxes: np.ndarray) -> tuple[float, np.ndarray]:
    """``1 - IoU(decoded box, target)`` per positive anchor, decoded without
    clipping. Where boxes do not overlap the gradient is zero."""
    shape = reg_offsets.shape
    r = reg_offsets.reshape(-1, 4)
    grad = np.zeros_like(r)
    pos = np.flatnonzero(asg >= 0)
    if len(pos) == 0:
        return 0.0, grad.reshape(shape)
    norm = max(1.0, float(len(pos)))
    a = anchors[pos]
    g = np.asarray(gt_boxes)[asg[pos]]
    b = decode_boxes(a, r[pos])
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]

    ix0 = np.maximum(b[:, 0], g[:, 0])
    iy0 = np.maximum(b[:, 1], g[:, 1])
    ix1 = np.minimum(b[:, 2], g[:, 2])
    iy1 = np.minimum(b[:, 3], g[:, 3])
    iw = ix1 - ix0
    ih = iy1 - iy0
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = w * h + box_areas(g) - inter
    iou = inter / union
    loss = (1.0 - iou).sum() / norm

    # d inter / d (x0, y0, x1, y1) of the decoded box
    on = overlap.astype(np.float64)
    di = np.stack([
        -ih * (b[:, 0] > g[:, 0]),
        -iw * (b[:, 1] > g[:, 1]),
        ih * (b[:, 2] < g[:, 2]),
        iw * (b[:, 3] < g[:, 3]),
    ], axis=1) * on[:, None]
    da = np.stack([-h, -w, h, w], axis=1)
    du = da - di
    diou = (di * union[:, None] - inter[:, None] * du) / (union * union)[:, None]
    dl = -diou / norm

    # chain through decode: x0 = cx - w/2, x1 = cx + w/2, cx = acx + dx * aw, w = aw * exp(dw)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    grad[pos, 0] = (dl[:, 0] + dl[:, 2]) * aw
    grad[pos, 1] = (dl[:, 1] + dl[:, 3]) * ah
    grad[pos, 2] = (dl[:, 2] - dl[:, 0]) * w / 2
    grad[pos, 3] = (dl[:, 3] - dl[:, 1]) * h / 2
    return float(loss), grad.reshape(shape)


# -------------------------------------------------------------- inference


def decode_predictions(pred: DensePrediction, anchors: AnchorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor boxes clipped to the grid and per-class sigmoid scores."""
    logits, offsets = pred.flat()
    if not (np.isfinite(logits).all() and np.isfinite(offsets).all()):
        raise ValueError("non-finite network outputs")
    boxes = decode_boxes(anchors.boxes, offsets, bounds=(anchors.grid_w, anchors.grid_h),
                         max_log_scale=MAX_LOG_SCALE)
    return boxes, expit(logits)


def detections_from_arrays(boxes: np.ndarray, scores: np.ndarray,
                           classes: np.ndarray) -> list[Detection]:
    return [
        Detection(BBox(*map(float, b)), int(c), float(s))
        for b, s, c in zip(boxes, scores, classes)
    ]


def predict(p: ModelParams, fm: np.ndarray, anchors: AnchorGrid, score_thr: float = 0.05,
            nms_thr: float = 0.5, max_dets: int | None = 100) -> list[Detection]:
    """Detections for one un-augmented feature map.

    Candidates scoring below ``score_thr`` are dropped, the rest go through
    per-class NMS, and the survivors are returned by descending score
    (capped at ``max_dets`` when given).
    """
    pred = forward(p, fm)
    if pred.cls_logits.reshape(-1, p.num_classes).shape[0] != len(anchors):
        raise ModelConfigError("prediction grid does not match the anchor grid")
    boxes, scores = decode_predictions(pred, anchors)
    anchor_idx, class_idx = np.nonzero(scores >= score_thr)
    cand_scores = scores[anchor_idx, class_idx]
    kept = []
    for c in range(p.num_classes):
        sel = np.flatnonzero(class_idx == c)
        if len(sel) == 0:
            continue
        k = nms_indices(boxes[anchor_idx[sel]], cand_scores[sel], nms_thr)
        kept.append(sel[k])
    if not kept:
        return []
    kept = np.concatenate(kept)
    kept = kept[np.argsort(-cand_scores[kept], kind="stable")]
    if max_dets is not None:
        kept = kept[:max_dets]
    return detections_from_arrays(boxes[anchor_idx[kept]], cand_scores[kept], class_idx[kept])


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | os.PathLike, p: ModelParams,
                    velocity: ModelParams | None = None) -> None:
    """Little-endian: six int32 (magic, version, C, D, K, A), then w_b, b_b,
    w_h, b_h and the matching momentum buffers as row-major float32."""
    velocity = velocity if velocity is not None else p.zeros_like()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<6i", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, p.channels,
                             p.hidden, p.num_classes, p.num_anchors))
        for arr in p.arrays() + velocity.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, ModelParams]:
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, c, d, k, a = struct.unpack("<6i", data[:24])
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic:#x})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if (len(data) - 24) % 4:
        raise ValueError(f"{path}: payload is not a whole number of float32 values")
    out = a * (k + 4)
    flat = np.frombuffer(data, dtype="<f4", offset=24).astype(np.float64)
    # the neighbourhood radius is not in the header; recover it from the size
    # of w_b, whose column count is (2r + 1)^2 * C
    rest = flat.size - 2 * (d + out * d + out)
    window = rest // (2 * d * c) if d * c > 0 and rest % (2 * d * c) == 0 else 0
    side = math.isqrt(window)
    if window < 1 or side * side != window or side % 2 == 0:
        raise ValueError(f"{path}: payload of {flat.size} floats does not fit header "
                         f"(C={c}, D={d}, K={k}, A={a})")
    shapes = [(d, window * c), (d,), (out, d), (out,)] * 2
    arrays = []
    pos = 0
    for s in shapes:
        size = math.prod(s)
        arrays.append(flat[pos:pos + size].reshape(s))
        pos += size
    params = ModelParams(*arrays[:4], num_classes=k, num_anchors=a, context=(side - 1) // 2)
    return params, params.with_arrays(arrays[4:])
