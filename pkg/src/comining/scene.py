"""Synthetic detection scenes rendered as ``H x W x C`` feature maps.

Each class owns a fixed unit-norm signature vector. Rendering adds that
vector to every cell whose centre falls inside an object's box, on top of
Gaussian background noise. Augmentations are photometric only, so the
boxes of the original view stay valid for the augmented one.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import Category, GtInstance, ImageRecord, LabelSet, SparseDataset
from .geometry import BBox

TENSOR_MAGIC = 0x4D464D43  # b"CMFM" read as little-endian int32

FeatureMap = np.ndarray


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def make_signatures(num_classes: int, channels: int, seed: int) -> np.ndarray:
    """Random unit vectors, one row per class.

    With ``channels >= num_classes`` the rows are made orthonormal by a QR
    step and then mixed slightly so classes are not perfectly separable by
    a single channel.
    """
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(channels, num_classes))
    if channels >= num_classes:
        q, _ = np.linalg.qr(raw)
        sig = q.T + 0.25 * rng.normal(size=(num_classes, channels)) / np.sqrt(channels)
    else:
        sig = raw.T
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


@dataclass(frozen=True)
class SceneConfig:
    grid_h: int = 16
    grid_w: int = 16
    channels: int = 8
    num_classes: int = 4
    objects_per_image: tuple[int, int] = (2, 6)
    object_size: tuple[int, int] = (1, 3)
    noise_sigma: float = 0.35
    signature_seed: int = 0
    signatures: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name in ("grid_h", "grid_w", "channels", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ConfigError("objects_per_image", f"invalid range {self.objects_per_image}")
        lo, hi = self.object_size
        if lo < 1 or hi < lo:
            raise ConfigError("object_size", f"invalid range {self.object_size}")
        if hi > min(self.grid_h, self.grid_w):
            raise ConfigError("object_size", f"max size {hi} exceeds grid {self.grid_h}x{self.grid_w}")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma", "must be >= 0")
        if self.signatures is None:
            sig = make_signatures(self.num_classes, self.channels, self.signature_seed)
            object.__setattr__(self, "signatures", sig)
        sig = np.asarray(self.signatures, dtype=np.float64)
        if sig.shape != (self.num_classes, self.channels):
            raise ConfigError("signatures", f"shape {sig.shape} != ({self.num_classes}, {self.channels})")
        if not np.allclose(np.linalg.norm(sig, axis=1), 1.0):
            raise ConfigError("signatures", "rows must be unit norm")
        object.__setattr__(self, "signatures", sig)


@dataclass(frozen=True)
class AugConfig:
    mode: str = "color"  # "none" | "blur" | "color"
    kernel_sigma: float = 0.8
    gain_range: tuple[float, float] = (0.6, 1.4)
    bias_range: tuple[float, float] = (-0.2, 0.2)

    def __post_init__(self) -> None:
        if self.mode not in ("none", "blur", "color"):
            raise ConfigError("aug.mode", f"unknown mode {self.mode!r}")
        if self.kernel_sigma < 0:
            raise ConfigError("aug.kernel_sigma", "must be >= 0")
        g0, g1 = self.gain_range
        if not (0 < g0 <= 1 <= g1):
            raise ConfigError("aug.gain_range", "must be a positive interval containing 1")
        b0, b1 = self.bias_range
        if b1 < b0:
            raise ConfigError("aug.bias_range", "empty interval")


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, image_id: int = 0,
                   ids: "count[int] | None" = None) -> LabelSet:
    """Draw a random object layout; boxes are integer-aligned and inside the grid."""
    ids = ids if ids is not None else count(1)
    n = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    out = []
    for _ in range(n):
        class_id = int(rng.integers(cfg.num_classes))
        size = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
        x0 = int(rng.integers(0, cfg.grid_w - size + 1))
        y0 = int(rng.integers(0, cfg.grid_h - size + 1))
        box = BBox(float(x0), float(y0), float(x0 + size), float(y0 + size))
        out.append(GtInstance(next(ids), image_id, class_id, box))
    return LabelSet(image_id, tuple(out))


def render(scene: LabelSet, cfg: SceneConfig, rng: np.random.Generator) -> FeatureMap:
    shape = (cfg.grid_h, cfg.grid_w, cfg.channels)
    if cfg.noise_sigma > 0:
        fm = rng.normal(0.0, cfg.noise_sigma, size=shape)
    else:
        fm = np.zeros(shape)
    cy = np.arange(cfg.grid_h) + 0.5
    cx = np.arange(cfg.grid_w) + 0.5
    for g in scene:
        b = g.bbox
        rows = (cy > b.y_min) & (cy < b.y_max)
        cols = (cx > b.x_min) & (cx < b.x_max)
        fm[np.ix_(rows, cols)] += cfg.signatures[g.class_id]
    return fm


def augment(fm: FeatureMap, a: AugConfig, rng: np.random.Generator) -> FeatureMap:
    if a.mode == "none":
        return fm.copy()
    if a.mode == "blur":
        return gaussian_filter(fm, sigma=(a.kernel_sigma, a.kernel_sigma, 0.0), mode="reflect")
    channels = fm.shape[-1]
    gain = rng.uniform(a.gain_range[0], a.gain_range[1], size=channels)
    bias = rng.uniform(a.bias_range[0], a.bias_range[1], size=channels)
    return fm * gain + bias


def write_tensor(path: str | os.PathLike, fm: FeatureMap) -> None:
    h, w, c = fm.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4i", TENSOR_MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(fm, dtype="<f4").tobytes())


def read_tensor(path: str | os.PathLike) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: truncated tensor header")
    magic, h, w, c = struct.unpack("<4i", data[:16])
    if magic != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {magic:#x}")
    payload = np.frombuffer(data, dtype="<f4", offset=16)
    if payload.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} floats, found {payload.size}")
    return payload.reshape(h, w, c).astype(np.float64)


def synthesize(cfg: SceneConfig, n_images: int, seed: int, split: str = "train",
               first_image_id: int = 1) -> tuple[SparseDataset, dict[int, FeatureMap]]:
    """Generate ``n_images`` scenes with full annotations and their feature maps.

    Image ``i`` uses its own generator seeded by ``(seed, i)`` so any subset
    can be regenerated independently.
    """
    ids = count(1)
    images, kept, features = [], {}, {}
    for i in range(n_images):
        image_id = first_image_id + i
        rng = np.random.default_rng([seed, i])
        labels = generate_scene(cfg, rng, image_id, ids)
        features[image_id] = render(labels, cfg, rng)
        images.append(ImageRecord(image_id, float(cfg.grid_w), float(cfg.grid_h),
                                  f"{split}_{image_id:06d}.bin"))
        kept[image_id] = labels
    cats = tuple(Category(k + 1, f"class_{k}") for k in range(cfg.num_classes))
    return SparseDataset(tuple(images), cats, kept), features
