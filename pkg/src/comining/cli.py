"""``comining`` command-line interface.

Subcommands: ``synth``, ``sparsify``, ``train``, ``eval`` and ``report``.
Configuration comes from a TOML file (``--config``) with the sections
``[scene]``, ``[synth]``, ``[data]``, ``[train]`` (with ``[train.cogen]``
and ``[train.aug]``) and ``[eval]``. Any key can be overridden from the
environment: ``COMINING_TRAIN__COGEN__TAU=0.5`` sets ``train.cogen.tau``.
Values are parsed as TOML literals, falling back to plain strings.

Exit codes: 0 success, 2 usage or configuration error, 3 training diverged,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .cogen import CoGenConfig
from .dataset import DatasetError, Protocol, ProtocolError, SparseDataset, load_dataset, save_dataset, sparsify
from .evaluation import DEFAULT_AREA_BOUNDS, Metrics, evaluate
from .geometry import BBox, Detection
from .model import ModelConfigError, build_anchors, load_checkpoint, predict
from .scene import AugConfig, ConfigError, SceneConfig, read_tensor, synthesize, write_tensor
from .train import TrainConfig, train

log = logging.getLogger("comining")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
ENV_PREFIX = "COMINING_"
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ------------------------------------------------------------------ config


def load_config(path: str | None, environ: Mapping[str, str] | None = None) -> dict:
    cfg: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
    apply_env(cfg, os.environ if environ is None else environ)
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_env(cfg: dict, environ: Mapping[str, str]) -> None:
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"{key}: {'.'.join(parts[:-1])} is not a table")
        node[parts[-1]] = _parse_value(environ[key])


def _tuplify(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def build(cls, section: Mapping | None, where: str, nested: Mapping[str, Any] | None = None):
    """Instantiate a config dataclass, naming the offending field on error."""
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in names:
            raise UsageError(f"{where}.{key}: unknown field")
        if nested and key in nested:
            kwargs[key] = nested[key](value, f"{where}.{key}")
        else:
            kwargs[key] = _tuplify(value)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        message = str(exc)[len(exc.field) + 2:]
        raise UsageError(f"{where}.{exc.field.split('.')[-1]}: {message}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from None


def scene_config(cfg: Mapping) -> SceneConfig:
    return build(SceneConfig, cfg.get("scene"), "scene")


def train_config(cfg: Mapping, seed: int | None = None) -> TrainConfig:
    section = dict(cfg.get("train") or {})
    if seed is not None:
        section["seed"] = seed
    elif "seed" not in section and "seed" in cfg:
        section["seed"] = cfg["seed"]
    return build(TrainConfig, section, "train", nested={
        "cogen": lambda v, w: build(CoGenConfig, v, w),
        "aug": lambda v, w: build(AugConfig, v, w),
    })


def _jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.compare}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        self.outputs = {
            str(p.relative_to(out_dir)): sha256(p)
            for p in sorted(out_dir.rglob("*")) if p.is_file() and p.name != MANIFEST
        }
        self.finished = _now()
        with open(out_dir / MANIFEST, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------- helpers


def relocate(ds: SparseDataset, src_dir: Path, dst_dir: Path) -> SparseDataset:
    """Rewrite tensor paths so they stay valid next to a file in ``dst_dir``."""
    images = tuple(
        dataclasses.replace(im, file_name=os.path.relpath(Path(src_dir) / im.file_name, dst_dir))
        for im in ds.images
    )
    return dataclasses.replace(ds, images=images)


def load_features(ds: SparseDataset, dataset_path: Path) -> dict[int, np.ndarray]:
    base = Path(dataset_path).parent
    return {im.image_id: read_tensor(base / im.file_name) for im in ds.images}


def _resolve(path: str | None, cfg_path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_absolute() and cfg_path is not None:
        p = Path(cfg_path).parent / p
    return p


def detections_for(params, ds: SparseDataset, features: Mapping[int, np.ndarray],
                   train_cfg: TrainConfig, eval_cfg: Mapping) -> dict[int, list[Detection]]:
    if not features:
        return {}
    fm0 = next(iter(features.values()))
    anchors = build_anchors(fm0.shape[0], fm0.shape[1], train_cfg.anchor_shapes)
    return {
        iid: predict(params, features[iid], anchors,
                     score_thr=float(eval_cfg.get("score_thr", 0.05)),
                     nms_thr=float(eval_cfg.get("nms_thr", 0.5)),
                     max_dets=int(eval_cfg.get("max_dets", 100)))
        for iid in ds.image_ids
    }


def run_evaluation(dets, ds: SparseDataset, eval_cfg: Mapping) -> Metrics:
    bounds = tuple(eval_cfg.get("area_bounds", DEFAULT_AREA_BOUNDS))
    return evaluate(dets, ds, area_bounds=bounds, max_dets=int(eval_cfg.get("max_dets", 100)))


def read_results(path: Path, ds: SparseDataset) -> dict[int, list[Detection]]:
    """COCO results format: a list of ``{image_id, category_id, bbox, score}``."""
    with open(path) as fh:
        try:
            rows = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON: {exc.msg}") from None
    if not isinstance(rows, list):
        raise DatasetError(f"{path}: expected a list of detections")
    cat_index = {c.id: i for i, c in enumerate(ds.categories)}
    out: dict[int, list[Detection]] = {}
    for n, r in enumerate(rows):
        try:
            det = Detection(BBox.from_xywh(*map(float, r["bbox"])), cat_index[r["category_id"]],
                            float(r["score"]))
            out.setdefault(int(r["image_id"]), []).append(det)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: detection #{n}: {exc!r}") from None
    return out


def write_results(path: Path, dets: Mapping[int, Sequence[Detection]], ds: SparseDataset) -> None:
    rows = [
        {"image_id": iid, "category_id": ds.categories[d.class_id].id,
         "bbox": list(d.bbox.to_xywh()), "score": d.score}
        for iid in sorted(dets) for d in dets[iid]
    ]
    with open(path, "w") as fh:
        json.dump(rows, fh)


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: dict) -> int:
    scene = scene_config(cfg)
    section = cfg.get("synth") or {}
    unknown = set(section) - {"n_train", "n_val"}
    if unknown:
        raise UsageError(f"synth.{sorted(unknown)[0]}: unknown field")
    n_train, n_val = int(section.get("n_train", 500)), int(section.get("n_val", 100))
    if n_train < 0 or n_val < 0:
        raise UsageError("synth.n_train/n_val: must be >= 0")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = _out_dir(args.out)
    manifest = RunManifest("synth", _jsonable({"scene": scene, "synth": section}), seed,
                           started=_now())
    train_seed, val_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    (out / "tensors").mkdir(exist_ok=True)
    for split, n, s, first in (("train", n_train, train_seed, 1), ("val", n_val, val_seed, 1_000_000)):
        ds, feats = synthesize(scene, n, s, split=split, first_image_id=first)
        ds = relocate(ds, out / "tensors", out)
        for im in ds.images:
            write_tensor(out / im.file_name, feats[im.image_id])
        save_dataset(ds, out / f"{split}.json")
    manifest.write(out)
    print(f"wrote {n_train} train / {n_val} val images to {out}")
    return EXIT_OK


def cmd_sparsify(args, cfg: dict) -> int:
    src = Path(args.input)
    try:
        protocol = Protocol.parse(args.protocol)
    except ProtocolError as exc:
        raise UsageError(f"--protocol: {exc}") from None
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    ds = load_dataset(src)
    try:
        sparse = sparsify(ds, protocol, seed)
    except ProtocolError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    sparse = relocate(sparse, src.parent, out)
    name = args.name or src.name
    save_dataset(sparse, out / name)
    manifest = RunManifest("sparsify", {"protocol": str(protocol)}, seed,
                           inputs={str(src): sha256(src)}, started=_now())
    manifest.write(out)
    print(f"{protocol}: kept {sparse.num_kept()}, erased {sparse.num_erased()} -> {out / name}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    tcfg = train_config(cfg, args.seed)
    data = cfg.get("data") or {}
    train_path = Path(args.train) if args.train else _resolve(data.get("train"), args.config)
    val_path = Path(args.val) if args.val else _resolve(data.get("val"), args.config)
    if train_path is None:
        raise UsageError("data.train: no training set given (config or --train)")
    eval_cfg = cfg.get("eval") or {}
    ds = load_dataset(train_path)
    feats = load_features(ds, train_path)
    out = _out_dir(args.out)
    inputs = {str(train_path): sha256(train_path)}
    manifest = RunManifest("train", _jsonable({"train": tcfg, "data": data, "eval": eval_cfg}),
                           tcfg.seed, inputs=inputs, started=_now())
    try:
        params, tlog = train(tcfg, ds, feats, out_dir=out)
    except ModelConfigError as exc:
        raise UsageError(str(exc)) from None
    summary: dict[str, Any] = {
        "mode": tcfg.mode, "seed": tcfg.seed, "protocol": str(ds.protocol),
        "status": tlog.status, "diverged_at": tlog.diverged_at,
        "iterations": len(tlog.records), "metrics": None,
    }
    if val_path is not None and tlog.status == "completed":
        val = load_dataset(val_path)
        inputs[str(val_path)] = sha256(val_path)
        try:
            dets = detections_for(params, val, load_features(val, val_path), tcfg, eval_cfg)
        except ValueError as exc:
            # finite loss but unusable outputs on unseen data
            log.warning("evaluation skipped: %s", exc)
        else:
            metrics = run_evaluation(dets, val, eval_cfg)
            metrics.write(out, [c.name for c in val.categories])
            summary["metrics"] = metrics.summary()
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    manifest.write(out)
    if tlog.status == "diverged":
        print(f"diverged at iteration {tlog.diverged_at}; partial log in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    ap = summary["metrics"]["ap"] if summary["metrics"] else None
    print(f"{tcfg.mode} finished {len(tlog.records)} iterations"
          + (f", val AP {100 * ap:.1f}" if ap is not None else ""))
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    if (args.checkpoint is None) == (args.detections is None):
        raise UsageError("give exactly one of --checkpoint or --detections")
    dataset = (Path(args.dataset) if args.dataset
               else _resolve((cfg.get("data") or {}).get("val"), args.config))
    if dataset is None:
        raise UsageError("--dataset: no evaluation set given")
    eval_cfg = cfg.get("eval") or {}
    ds = load_dataset(dataset)
    inputs = {str(dataset): sha256(dataset)}
    if args.checkpoint is not None:
        tcfg = train_config(cfg)
        params, _ = load_checkpoint(args.checkpoint)
        feats = load_features(ds, dataset)
        try:
            dets = detections_for(params, ds, feats, tcfg, eval_cfg)
        except ModelConfigError as exc:
            raise UsageError(str(exc)) from None
        inputs[args.checkpoint] = sha256(Path(args.checkpoint))
    else:
        dets = read_results(Path(args.detections), ds)
        inputs[args.detections] = sha256(Path(args.detections))
    out = _out_dir(args.out)
    metrics = run_evaluation(dets, ds, eval_cfg)
    metrics.write(out, [c.name for c in ds.categories])
    if args.checkpoint is not None:
        write_results(out / "detections.json", dets, ds)
    RunManifest("eval", _jsonable({"eval": eval_cfg}), None, inputs=inputs, started=_now()).write(out)
    ap = metrics.ap
    print(f"AP {100 * ap:.1f}" if ap is not None else "AP n/a")
    return EXIT_OK


def _read_series(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args, cfg: dict) -> int:
    rows: dict[str, dict[str, list[float | None]]] = {}
    modes: list[str] = []
    warnings = 0
    out = _out_dir(args.out)
    (out / "series").mkdir(exist_ok=True)
    for run in args.runs:
        run = Path(run)
        try:
            with open(run / "summary.json") as fh:
                summary = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            log.warning("%s: no usable summary (%s)", run, exc)
            warnings += 1
            continue
        proto, mode = summary.get("protocol", "?"), summary.get("mode", "?")
        if mode not in modes:
            modes.append(mode)
        ap = (summary.get("metrics") or {}).get("ap")
        if ap is None:
            log.warning("%s: no metrics (status %s)", run, summary.get("status"))
            warnings += 1
        rows.setdefault(proto, {}).setdefault(mode, []).append(ap)
        if (run / "train_log.csv").exists():
            series = _read_series(run / "train_log.csv")
            with open(out / "series" / f"{run.name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iteration", "loss", "pseudo_o", "pseudo_a"])
                for r in series:
                    w.writerow([r["iteration"], r["loss"], r["pseudo_o"], r["pseudo_a"]])

    order = [m for m in ("original", "augmented", "joint", "comining") if m in modes]
    order += [m for m in modes if m not in order]

    def cell(proto: str, mode: str) -> str:
        vals = [v for v in rows[proto].get(mode, []) if v is not None]
        if not vals:
            return "-"
        return f"{100 * float(np.median(vals)):.1f}"

    table = [[p] + [cell(p, m) for m in order] for p in rows]
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["protocol"] + order)
        w.writerows(table)
    with open(out / "table.md", "w") as fh:
        fh.write("| protocol | " + " | ".join(order) + " |\n")
        fh.write("|---" * (len(order) + 1) + "|\n")
        for r in table:
            fh.write("| " + " | ".join(r) + " |\n")
    with open(out / "report.json", "w") as fh:
        json.dump({"runs": len(args.runs), "warnings": warnings}, fh, indent=1)
    sys.stdout.write((out / "table.md").read_text())
    if warnings:
        print(f"{warnings} warning(s)", file=sys.stderr)
    return EXIT_OK


# -------------------------------------------------------------------- main


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comining", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="overrides the configured seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic train/val dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sparsify", help="erase annotations under a protocol")
    common(p)
    p.add_argument("--in", dest="input", required=True, help="dataset JSON")
    p.add_argument("--protocol", required=True, help="full | easy | hard | extreme | miss:<rate>")
    p.add_argument("--name", help="output file name (default: input name)")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--train", help="training dataset JSON (overrides data.train)")
    p.add_argument("--val", help="validation dataset JSON (overrides data.val)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a detections file")
    common(p)
    p.add_argument("--dataset", help="dataset JSON with complete labels")
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="COCO results JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate run directories by protocol and mode")
    common(p)
    p.add_argument("runs", nargs="+", help="run directories")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
