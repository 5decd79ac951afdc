"""Siamese training loop with cross-branch pseudo-label supervision.

Four modes share one code path:

``original``   one view (the input as-is) supervised by the sparse labels;
``augmented``  one view (the augmented input) supervised by the sparse labels;
``joint``      both views through the same parameters, each supervised by
               the sparse labels only;
``comining``   both views, each supervised by the sparse labels plus the
               pseudo-labels mined from the *other* view's predictions.

In single-view modes the lone branch is reported in the ``*_o`` columns of
the log and the ``*_a`` columns stay zero.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cogen import CoGenConfig, co_generate_indices, merge_arrays
from .dataset import LabelSet, SparseDataset
from .model import (
    AnchorGrid,
    DensePrediction,
    ModelConfigError,
    ModelParams,
    assign,
    backward,
    build_anchors,
    decode_predictions,
    focal_loss,
    forward,
    init_params,
    iou_reg_loss,
    save_checkpoint,
    sgd_step,
    smooth_l1_loss,
)
from .scene import AugConfig, augment

log = logging.getLogger(__name__)

MODES = ("original", "augmented", "joint", "comining")

# decoded boxes thinner than this cannot serve as regression targets
MIN_PSEUDO_SIZE = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "comining"
    n_max: int = 2000
    batch_size: int = 4
    eta0: float = 0.05
    milestones: tuple[float, ...] = (2 / 3, 8 / 9)
    warmup_iters: int = 22
    momentum: float = 0.9
    seed: int = 0
    hidden: int = 32
    context: int = 1
    anchor_shapes: tuple[tuple[float, float], ...] = ((1.0, 1.0), (2.0, 2.0), (3.0, 3.0))
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    reg_loss: str = "smooth_l1"  # or "iou"
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    init_prior: float = 0.01
    cogen: CoGenConfig = field(default_factory=CoGenConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    divergence_cap: float = 100.0
    divergence_patience: int = 3
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_max < 0:
            raise ValueError("n_max must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ms = tuple(self.milestones)
        if any(not 0.0 < m < 1.0 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1), got {ms}")
        if self.n_max > 0 and not 0 <= self.warmup_iters < self.n_max:
            raise ValueError("warmup_iters must be in [0, n_max)")
        if self.reg_loss not in ("smooth_l1", "iou"):
            raise ValueError(f"unknown reg_loss {self.reg_loss!r}")


def lr_schedule(k: int, cfg: TrainConfig) -> float:
    """Linear warmup, then a x0.1 step at every milestone passed (0-based ``k``)."""
    if k < cfg.warmup_iters:
        return cfg.eta0 * (k + 1) / cfg.warmup_iters
    passed = sum(1 for m in cfg.milestones if k >= m * cfg.n_max)
    return cfg.eta0 * 0.1 ** passed


@dataclass(frozen=True)
class TrainItem:
    image_id: int
    features: np.ndarray  # (H, W, C)
    gt_boxes: np.ndarray  # (G, 4)
    gt_classes: np.ndarray  # (G,)

    @classmethod
    def from_labels(cls, features: np.ndarray, labels: LabelSet) -> "TrainItem":
        return cls(labels.image_id, features, labels.boxes(), labels.classes())


@dataclass
class TrainState:
    """The single parameter store shared by both branches, plus momentum."""

    params: ModelParams
    velocity: ModelParams
    iteration: int = 0


@dataclass(frozen=True)
class StepRecord:
    iteration: int
    lr: float
    loss: float
    loss_o: float
    loss_a: float
    cls_o: float
    reg_o: float
    cls_a: float
    reg_a: float
    pseudo_o: int  # pseudo-labels mined from the original view (supervise the augmented one)
    pseudo_a: int  # pseudo-labels mined from the augmented view (supervise the original one)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Supervision:
    """The label set one view was trained against in one step."""

    image_id: int
    view: str
    boxes: np.ndarray
    classes: np.ndarray
    origins: tuple[str, ...]
    scores: np.ndarray  # NaN for annotated entries


@dataclass
class StepResult:
    params: ModelParams
    velocity: ModelParams
    record: StepRecord
    image_losses: np.ndarray  # (B,) per-image total loss
    supervision: list[Supervision]
    finite: bool


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)
    status: str = "completed"
    diverged_at: int | None = None

    TRACE_COLUMNS = ("iteration", "image_id", "branch", "supervises", "class_id", "score",
                     "x_min", "y_min", "x_max", "y_max")

    def write_csv(self, out_dir: str | os.PathLike) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(StepRecord.columns())
            for r in self.records:
                w.writerow([_fmt(getattr(r, c)) for c in StepRecord.columns()])
        with open(out_dir / "pseudo_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.TRACE_COLUMNS)
            for row in self.trace:
                w.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _views(mode: str) -> tuple[str, ...]:
    return {
        "original": ("original",),
        "augmented": ("augmented",),
        "joint": ("original", "augmented"),
        "comining": ("original", "augmented"),
    }[mode]


def _view_loss(cls_logits: np.ndarray, reg: np.ndarray, anchors: AnchorGrid, boxes: np.ndarray,
               classes: np.ndarray, cfg: TrainConfig) -> tuple[float, float, np.ndarray, np.ndarray]:
    asg = assign(anchors.boxes, boxes, cfg.pos_iou, cfg.neg_iou)
    lc, gc = focal_loss(cls_logits, asg, classes, cfg.focal_alpha, cfg.focal_gamma)
    if cfg.reg_loss == "iou":
        lr_, gr = iou_reg_loss(reg, asg, anchors.boxes, boxes)
    else:
        lr_, gr = smooth_l1_loss(reg, asg, anchors.boxes, boxes, cfg.smooth_l1_beta)
    return lc, lr_, gc, gr


def _candidates(cls_logits: np.ndarray, reg: np.ndarray, anchors: AnchorGrid,
                tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Detached dense outputs as (boxes, scores, classes) with score >= tau.

    Only values are read; degenerate (clipped-away) boxes are discarded.
    """
    boxes, scores = decode_predictions(DensePrediction(cls_logits.copy(), reg.copy()), anchors)
    a_idx, c_idx = np.nonzero(scores >= tau)
    b = boxes[a_idx]
    ok = ((b[:, 2] - b[:, 0]) > MIN_PSEUDO_SIZE) & ((b[:, 3] - b[:, 1]) > MIN_PSEUDO_SIZE)
    return b[ok], scores[a_idx[ok], c_idx[ok]], c_idx[ok].astype(np.int64)


def _step(state: TrainState, batch: Sequence[TrainItem], cfg: TrainConfig, k: int,
          rng: np.random.Generator, anchors: AnchorGrid, mine: bool) -> StepResult:
    params = state.params
    views = _views(cfg.mode)
    nb = len(batch)
    x_o = np.stack([it.features for it in batch])
    inputs = {}
    if "original" in views:
        inputs["original"] = x_o
    if "augmented" in views:
        inputs["augmented"] = np.stack([augment(it.features, cfg.aug, rng) for it in batch])

    # both branches read the same parameter object
    preds = {v: forward(params, inputs[v]) for v in views}

    finite = all(np.isfinite(p.cls_logits).all() and np.isfinite(p.reg_offsets).all()
                 for p in preds.values())

    pseudo: dict[str, list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}
    if mine and finite:
        for v in views:
            pseudo[v] = []
            for i, it in enumerate(batch):
                boxes, scores, classes = _candidates(
                    preds[v].cls_logits[i], preds[v].reg_offsets[i], anchors, cfg.cogen.tau)
                keep = co_generate_indices(boxes, scores, it.gt_boxes, cfg.cogen)
                pseudo[v].append((boxes[keep], scores[keep], classes[keep]))

    other = {"original": "augmented", "augmented": "original"}
    comp = {v: np.zeros(nb) for v in ("cls_o", "reg_o", "cls_a", "reg_a")}
    grads = {}
    supervision = []
    for v in views:
        slot = "o" if v == views[0] else "a"
        g_cls = np.zeros_like(preds[v].cls_logits)
        g_reg = np.zeros_like(preds[v].reg_offsets)
        for i, it in enumerate(batch):
            boxes, classes = it.gt_boxes, it.gt_classes
            origins = ("annotated",) * len(classes)
            scores = np.full(len(classes), np.nan)
            if pseudo:
                # this view learns from the other view's mined labels
                src = other[v]
                pb, ps, pc = pseudo[src][i]
                boxes, classes = merge_arrays(boxes, classes, pb, pc)
                origins = origins + (src,) * len(pc)
                scores = np.concatenate([scores, ps])
            supervision.append(Supervision(it.image_id, v, boxes, classes, origins, scores))
            if not finite:
                comp["cls_" + slot][i] = comp["reg_" + slot][i] = np.nan
                continue
            lc, lr_, gc, gr = _view_loss(preds[v].cls_logits[i], preds[v].reg_offsets[i],
                                         anchors, boxes, classes, cfg)
            comp["cls_" + slot][i] = lc
            comp["reg_" + slot][i] = lr_
            g_cls[i] = gc / nb
            g_reg[i] = gr / nb
        grads[v] = (g_cls, g_reg)

    per_image = comp["cls_o"] + comp["reg_o"] + comp["cls_a"] + comp["reg_a"]
    loss = float(per_image.mean())
    lr = lr_schedule(k, cfg)
    finite = finite and math.isfinite(loss)

    if finite:
        total = None
        for v in views:
            g = backward(params, inputs[v], *grads[v])
            total = g if total is None else total.with_arrays(
                [a + b for a, b in zip(total.arrays(), g.arrays())])
        new_params, new_velocity = sgd_step(params, total, lr, cfg.momentum, state.velocity)
    else:
        new_params, new_velocity = params, state.velocity

    npo = sum(len(p[2]) for p in pseudo.get("original", []))
    npa = sum(len(p[2]) for p in pseudo.get("augmented", []))
    m = {key: float(val.mean()) for key, val in comp.items()}
    record = StepRecord(
        iteration=k, lr=lr, loss=loss,
        loss_o=m["cls_o"] + m["reg_o"], loss_a=m["cls_a"] + m["reg_a"],
        cls_o=m["cls_o"], reg_o=m["reg_o"], cls_a=m["cls_a"], reg_a=m["reg_a"],
        pseudo_o=npo, pseudo_a=npa,
    )
    return StepResult(new_params, new_velocity, record, per_image, supervision, finite)


def comining_step(state: TrainState, batch: Sequence[TrainItem], cfg: TrainConfig, k: int,
                  rng: np.random.Generator, anchors: AnchorGrid) -> StepResult:
    if cfg.mode != "comining":
        raise ValueError(f"comining_step called with mode {cfg.mode!r}")
    return _step(state, batch, cfg, k, rng, anchors, mine=True)


def baseline_step(state: TrainState, batch: Sequence[TrainItem], cfg: TrainConfig, k: int,
                  rng: np.random.Generator, anchors: AnchorGrid) -> StepResult:
    if cfg.mode == "comining":
        raise ValueError("baseline_step does not mine pseudo-labels; use comining_step")
    return _step(state, batch, cfg, k, rng, anchors, mine=False)


def step_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, k, 1])


def batch_schedule(n_items: int, batch_size: int, n_steps: int, seed: int) -> list[np.ndarray]:
    """Index batches drawn from consecutive per-epoch shuffles."""
    out = []
    stream: list[int] = []
    epoch = 0
    for _ in range(n_steps):
        while len(stream) < batch_size:
            stream.extend(np.random.default_rng([seed, epoch, 0]).permutation(n_items).tolist())
            epoch += 1
        out.append(np.array(stream[:batch_size]))
        del stream[:batch_size]
    return out


def build_items(ds: SparseDataset, features: Mapping[int, np.ndarray]) -> list[TrainItem]:
    items = []
    shape = None
    for image_id in ds.image_ids:
        if image_id not in features:
            raise ModelConfigError(f"no feature map for image {image_id}")
        fm = np.asarray(features[image_id], dtype=np.float64)
        if fm.ndim != 3:
            raise ModelConfigError(f"feature map for image {image_id} must be H x W x C")
        if shape is None:
            shape = fm.shape
        elif fm.shape != shape:
            raise ModelConfigError(f"feature map for image {image_id} has shape {fm.shape}, expected {shape}")
        labels = ds.labels(image_id)
        if len(labels) and labels.classes().max() >= ds.num_classes:
            raise ModelConfigError(f"image {image_id} has a class id outside [0, {ds.num_classes})")
        items.append(TrainItem.from_labels(fm, labels))
    return items


def init_state(cfg: TrainConfig, channels: int, num_classes: int) -> TrainState:
    params = init_params(channels, cfg.hidden, num_classes, len(cfg.anchor_shapes),
                         np.random.default_rng([cfg.seed, 0, 0]), prior=cfg.init_prior,
                         context=cfg.context)
    return TrainState(params, params.zeros_like())


def train(cfg: TrainConfig, ds: SparseDataset, features: Mapping[int, np.ndarray],
          out_dir: str | os.PathLike | None = None,
          state: TrainState | None = None) -> tuple[ModelParams, TrainLog]:
    """Run ``cfg.n_max`` iterations; deterministic given ``cfg.seed``.

    When ``out_dir`` is given, checkpoints (every ``cfg.checkpoint_every``
    iterations and at the end), ``train_log.csv`` and ``pseudo_trace.csv``
    are written there. A run whose loss is non-finite or above
    ``cfg.divergence_cap`` for ``cfg.divergence_patience`` consecutive
    iterations stops with status ``"diverged"``.
    """
    items = build_items(ds, features)
    if not items:
        raise ModelConfigError("training set is empty")
    h, w, c = items[0].features.shape
    anchors = build_anchors(h, w, cfg.anchor_shapes)
    if state is None:
        state = init_state(cfg, c, ds.num_classes)
    elif state.params.channels != c or state.params.num_classes != ds.num_classes:
        raise ModelConfigError("initial parameters do not match the dataset dimensions")
    state.params.validate()
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    step_fn = comining_step if cfg.mode == "comining" else baseline_step
    tlog = TrainLog()
    bad = 0
    batches = batch_schedule(len(items), cfg.batch_size, cfg.n_max, cfg.seed)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
        for k, idx in enumerate(batches):
            batch = [items[i] for i in idx]
            res = step_fn(state, batch, cfg, k, step_rng(cfg.seed, k), anchors)
            tlog.records.append(res.record)
            if cfg.mode == "comining":
                for sup in res.supervision:
                    for j, origin in enumerate(sup.origins):
                        if origin == "annotated":
                            continue
                        tlog.trace.append((k, sup.image_id, origin, sup.view,
                                           int(sup.classes[j]), float(sup.scores[j]),
                                           *map(float, sup.boxes[j])))
            state.params, state.velocity = res.params, res.velocity
            state.iteration = k + 1
            if not res.finite or res.record.loss > cfg.divergence_cap:
                bad += 1
            else:
                bad = 0
            if bad >= cfg.divergence_patience:
                tlog.status = "diverged"
                tlog.diverged_at = k
                log.warning("training diverged at iteration %d (loss %r)", k, res.record.loss)
                break
            if out_dir is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoints" / f"ckpt_{k + 1:06d}.bin",
                                state.params, state.velocity)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoints" / "final.bin", state.params, state.velocity)
        tlog.write_csv(out_dir)
    return state.params, tlog
