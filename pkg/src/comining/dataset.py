"""COCO-schema annotation I/O and annotation-sparsification protocols.

A :class:`SparseDataset` holds, per image, the annotations a learner may see
(``kept``) and the ones removed by a protocol (``erased``). The erased side
exists for diagnostics and for the ``.erased.json`` sidecar only; nothing
that feeds training reads it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .geometry import BBox

ERASED_SUFFIX = ".erased.json"


class DatasetError(ValueError):
    """Malformed or inconsistent annotation data."""


class ProtocolError(ValueError):
    """A sparsification protocol was misused."""


@dataclass(frozen=True)
class GtInstance:
    instance_id: int
    image_id: int
    class_id: int
    bbox: BBox
    # "annotated" for ground truth; pseudo-labels carry the branch they came from
    origin: str = "annotated"


@dataclass(frozen=True)
class LabelSet:
    image_id: int
    instances: tuple[GtInstance, ...] = ()

    def __post_init__(self) -> None:
        for inst in self.instances:
            if inst.image_id != self.image_id:
                raise DatasetError(
                    f"instance {inst.instance_id} belongs to image {inst.image_id}, "
                    f"not {self.image_id}"
                )

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[GtInstance]:
        return iter(self.instances)

    def boxes(self) -> np.ndarray:
        if not self.instances:
            return np.zeros((0, 4))
        return np.array([g.bbox.as_tuple() for g in self.instances], dtype=np.float64)

    def classes(self) -> np.ndarray:
        return np.array([g.class_id for g in self.instances], dtype=np.int64)


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: float
    height: float
    file_name: str = ""


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Protocol:
    """One of ``full``, ``easy``, ``hard``, ``extreme`` or ``miss`` (with a rate)."""

    kind: str
    rate: float | None = None

    KINDS = ("full", "easy", "hard", "extreme", "miss")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ProtocolError(f"unknown protocol {self.kind!r}")
        if self.kind == "miss":
            if self.rate is None or not 0.0 < self.rate < 1.0:
                raise ProtocolError(f"miss rate must be in (0, 1), got {self.rate}")
        elif self.rate is not None:
            raise ProtocolError(f"protocol {self.kind!r} takes no rate")

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        """Parse ``"hard"`` or ``"miss:0.5"``."""
        text = text.strip().lower()
        if ":" in text:
            kind, _, rate = text.partition(":")
            try:
                return cls(kind, float(rate))
            except ValueError as exc:
                raise ProtocolError(str(exc)) from None
        return cls(text)

    def __str__(self) -> str:
        return f"miss:{self.rate:g}" if self.kind == "miss" else self.kind


FULL = Protocol("full")
EASY = Protocol("easy")
HARD = Protocol("hard")
EXTREME = Protocol("extreme")


def MissRate(rate: float) -> Protocol:
    return Protocol("miss", rate)


@dataclass(frozen=True)
class SparseDataset:
    images: tuple[ImageRecord, ...]
    categories: tuple[Category, ...]
    kept: Mapping[int, LabelSet]
    _erased: Mapping[int, LabelSet] = field(repr=False, default_factory=dict)
    protocol: Protocol = FULL
    seed: int | None = None

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    @property
    def image_ids(self) -> list[int]:
        return [im.image_id for im in self.images]

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    def labels(self, image_id: int) -> LabelSet:
        """The annotations visible to training for one image."""
        return self.kept.get(image_id, LabelSet(image_id))

    def erased_for_diagnostics(self, image_id: int) -> LabelSet:
        return self._erased.get(image_id, LabelSet(image_id))

    def num_kept(self) -> int:
        return sum(len(v) for v in self.kept.values())

    def num_erased(self) -> int:
        return sum(len(v) for v in self._erased.values())


# ---------------------------------------------------------------- file I/O


def _require(record: Mapping, key: str, kind: str, where: str):
    if key not in record:
        raise DatasetError(f"{where}: missing field {key!r}")
    value = record[key]
    if kind == "num" and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise DatasetError(f"{where}: field {key!r} must be a number")
    if kind == "int" and (isinstance(value, bool) or not isinstance(value, int)):
        raise DatasetError(f"{where}: field {key!r} must be an integer")
    return value


def _parse_coco(doc: Mapping, source: str) -> tuple[
    tuple[ImageRecord, ...], tuple[Category, ...], dict[int, list[GtInstance]], dict
]:
    if not isinstance(doc, Mapping):
        raise DatasetError(f"{source}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise DatasetError(f"{source}: missing list {key!r}")

    categories = []
    for i, rec in enumerate(doc["categories"]):
        where = f"{source}: categories[{i}]"
        if not isinstance(rec, Mapping):
            raise DatasetError(f"{where}: not an object")
        categories.append(Category(_require(rec, "id", "int", where), str(rec.get("name", ""))))
    categories.sort(key=lambda c: c.id)
    class_of = {c.id: idx for idx, c in enumerate(categories)}
    if len(class_of) != len(categories):
        raise DatasetError(f"{source}: duplicate category ids")

    images = []
    for i, rec in enumerate(doc["images"]):
        where = f"{source}: images[{i}]"
        if not isinstance(rec, Mapping):
            raise DatasetError(f"{where}: not an object")
        images.append(ImageRecord(
            image_id=_require(rec, "id", "int", where),
            width=float(_require(rec, "width", "num", where)),
            height=float(_require(rec, "height", "num", where)),
            file_name=str(rec.get("file_name", "")),
        ))
    by_id = {im.image_id: im for im in images}
    if len(by_id) != len(images):
        raise DatasetError(f"{source}: duplicate image ids")

    grouped: dict[int, list[GtInstance]] = {im.image_id: [] for im in images}
    seen: set[int] = set()
    for i, rec in enumerate(doc["annotations"]):
        where = f"{source}: annotations[{i}]"
        if not isinstance(rec, Mapping):
            raise DatasetError(f"{where}: not an object")
        ann_id = _require(rec, "id", "int", where)
        where = f"{source}: annotation id={ann_id}"
        image_id = _require(rec, "image_id", "int", where)
        cat_id = _require(rec, "category_id", "int", where)
        bbox = _require(rec, "bbox", "list", where)
        if (not isinstance(bbox, list) or len(bbox) != 4
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)):
            raise DatasetError(f"{where}: bbox must be four numbers [x, y, w, h]")
        if ann_id in seen:
            raise DatasetError(f"{where}: duplicate annotation id")
        seen.add(ann_id)
        if image_id not in by_id:
            raise DatasetError(f"{where}: unknown image_id {image_id}")
        if cat_id not in class_of:
            raise DatasetError(f"{where}: unknown category_id {cat_id}")
        x, y, w, h = (float(v) for v in bbox)
        if not all(math.isfinite(v) for v in (x, y, w, h)):
            raise DatasetError(f"{where}: non-finite bbox")
        if w <= 0 or h <= 0:
            raise DatasetError(f"{where}: bbox width/height must be positive")
        im = by_id[image_id]
        if x < 0 or y < 0 or x + w > im.width or y + h > im.height:
            raise DatasetError(f"{where}: bbox {bbox} outside image {image_id} bounds")
        grouped[image_id].append(GtInstance(ann_id, image_id, class_of[cat_id], BBox.from_xywh(x, y, w, h)))
    info = doc.get("info") if isinstance(doc.get("info"), Mapping) else {}
    return tuple(images), tuple(categories), grouped, info


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def erased_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    return p.with_name(stem + ERASED_SUFFIX)


def load_dataset(path: str | os.PathLike) -> SparseDataset:
    """Load a COCO-schema annotation file.

    A plain COCO file yields a ``full`` dataset with nothing erased. Files
    written by :func:`save_dataset` also carry the protocol in ``info`` and
    an erased sidecar, both of which are read back when present.
    """
    path = Path(path)
    images, categories, grouped, info = _parse_coco(_read_json(path), str(path))
    kept = {iid: LabelSet(iid, tuple(v)) for iid, v in grouped.items()}

    erased: dict[int, LabelSet] = {}
    side = erased_path(path)
    if side.exists():
        _, _, egrouped, _ = _parse_coco(_read_json(side), str(side))
        erased = {iid: LabelSet(iid, tuple(v)) for iid, v in egrouped.items() if v}

    protocol = FULL
    if "protocol" in info:
        try:
            protocol = Protocol.parse(str(info["protocol"]))
        except ProtocolError as exc:
            raise DatasetError(f"{path}: info.protocol: {exc}") from None
    seed = info.get("seed")
    return SparseDataset(images, categories, kept, erased, protocol,
                         int(seed) if seed is not None else None)


def _coco_doc(ds: SparseDataset, labels: Mapping[int, LabelSet], info: dict | None) -> dict:
    doc: dict = {}
    if info is not None:
        doc["info"] = info
    doc["images"] = [
        {"id": im.image_id, "width": im.width, "height": im.height, "file_name": im.file_name}
        for im in ds.images
    ]
    anns = []
    for im in ds.images:
        for g in labels.get(im.image_id, LabelSet(im.image_id)):
            anns.append({
                "id": g.instance_id,
                "image_id": g.image_id,
                "category_id": ds.categories[g.class_id].id,
                "bbox": list(g.bbox.to_xywh()),
            })
    doc["annotations"] = anns
    doc["categories"] = [{"id": c.id, "name": c.name} for c in ds.categories]
    return doc


def save_dataset(ds: SparseDataset, path: str | os.PathLike) -> None:
    """Write kept annotations to ``path`` and erased ones to the sidecar."""
    path = Path(path)
    info = {"protocol": str(ds.protocol)}
    if ds.seed is not None:
        info["seed"] = ds.seed
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_coco_doc(ds, ds.kept, info), fh, indent=1)
    with open(erased_path(path), "w", encoding="utf-8") as fh:
        json.dump(_coco_doc(ds, ds._erased, None), fh, indent=1)


# --------------------------------------------------------- sparsification


def _split(labels: LabelSet, erase: Iterable[int]) -> tuple[LabelSet, LabelSet]:
    erase = set(erase)
    keep = tuple(g for i, g in enumerate(labels.instances) if i not in erase)
    gone = tuple(g for i, g in enumerate(labels.instances) if i in erase)
    return LabelSet(labels.image_id, keep), LabelSet(labels.image_id, gone)


def sparsify(ds: SparseDataset, protocol: Protocol, seed: int) -> SparseDataset:
    """Erase annotations according to ``protocol``; deterministic in ``seed``.

    easy erases one instance from every image holding at least two; hard
    erases ``floor(n/2)``; extreme keeps a single instance; ``miss:r``
    erases ``floor(r * m_c)`` instances of each category across the whole
    dataset. Images without annotations pass through unchanged.
    """
    if ds.protocol != FULL or ds.num_erased() > 0:
        raise ProtocolError(f"dataset is already sparsified ({ds.protocol})")
    rng = np.random.default_rng(seed)
    kept: dict[int, LabelSet] = {}
    erased: dict[int, LabelSet] = {}

    if protocol.kind == "miss":
        members: dict[int, list[tuple[int, int]]] = {}
        for im in ds.images:
            for idx, g in enumerate(ds.labels(im.image_id)):
                members.setdefault(g.class_id, []).append((im.image_id, idx))
        to_erase: dict[int, set[int]] = {}
        for class_id in sorted(members):
            pool = members[class_id]
            count = math.floor(protocol.rate * len(pool))
            for j in rng.choice(len(pool), size=count, replace=False):
                image_id, idx = pool[j]
                to_erase.setdefault(image_id, set()).add(idx)
        for im in ds.images:
            kept[im.image_id], erased[im.image_id] = _split(
                ds.labels(im.image_id), to_erase.get(im.image_id, ()))
    else:
        for im in ds.images:
            labels = ds.labels(im.image_id)
            n = len(labels)
            if protocol.kind == "easy":
                count = 1 if n >= 2 else 0
            elif protocol.kind == "hard":
                count = n // 2
            elif protocol.kind == "extreme":
                count = max(n - 1, 0)
            else:
                count = 0
            chosen = rng.choice(n, size=count, replace=False) if count else ()
            kept[im.image_id], erased[im.image_id] = _split(labels, chosen)

    erased = {k: v for k, v in erased.items() if len(v)}
    return replace(ds, kept=kept, _erased=erased, protocol=protocol, seed=seed)
