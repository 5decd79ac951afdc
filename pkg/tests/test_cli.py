import csv
import json
import math
from collections import Counter
from pathlib import Path

import pytest

from comining.cli import load_config, main, read_results
from comining.dataset import load_dataset
from comining.evaluation import evaluate

CONFIG = """
seed = 3
[scene]
grid_h = 8
grid_w = 8
channels = 4
num_classes = 2
objects_per_image = [1, 5]
[synth]
n_train = 16
n_val = 8
[data]
train = "data/train.json"
val = "data/val.json"
[train]
mode = "original"
n_max = 50
batch_size = 2
warmup_iters = 2
hidden = 6
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    (root / "c.toml").write_text(CONFIG)
    assert main(["synth", "--config", str(root / "c.toml"), "--out", str(root / "data")]) == 0
    return root


def cfg_file(root, extra="", name="x.toml"):
    p = root / name
    p.write_text(CONFIG + extra)
    return str(p)


def read_json(p):
    return json.loads(Path(p).read_text())


class TestSynth:
    def test_outputs(self, ws):
        for name in ("train.json", "val.json", "train.erased.json", "manifest.json"):
            assert (ws / "data" / name).exists()
        ds = load_dataset(ws / "data" / "train.json")
        assert len(ds.images) == 16
        assert (ws / "data" / ds.images[0].file_name).exists()
        m = read_json(ws / "data" / "manifest.json")
        assert m["command"] == "synth" and m["seed"] == 3

    def test_zero_images(self, tmp_path):
        c = cfg_file(tmp_path, "", "z.toml")
        Path(c).write_text(CONFIG.replace("n_train = 16", "n_train = 0").replace("n_val = 8", "n_val = 0"))
        assert main(["synth", "--config", c, "--out", str(tmp_path / "d")]) == 0
        doc = read_json(tmp_path / "d" / "train.json")
        assert doc["images"] == [] and doc["annotations"] == []

    def test_deterministic_hashes(self, ws, tmp_path):
        assert main(["synth", "--config", str(ws / "c.toml"), "--out", str(tmp_path / "again")]) == 0
        a = read_json(ws / "data" / "manifest.json")["outputs"]
        b = read_json(tmp_path / "again" / "manifest.json")["outputs"]
        assert a == b

    def test_seed_flag(self, ws, tmp_path):
        assert main(["synth", "--config", str(ws / "c.toml"), "--seed", "4",
                     "--out", str(tmp_path / "s4")]) == 0
        a = read_json(ws / "data" / "manifest.json")["outputs"]
        b = read_json(tmp_path / "s4" / "manifest.json")["outputs"]
        assert a["train.json"] != b["train.json"]

    def test_bad_object_size(self, tmp_path, capsys):
        c = cfg_file(tmp_path, "", "bad.toml")
        Path(c).write_text(CONFIG.replace("objects_per_image = [1, 5]", "object_size = [1, 20]"))
        assert main(["synth", "--config", c, "--out", str(tmp_path / "d")]) == 2
        assert "scene.object_size" in capsys.readouterr().err


class TestSparsify:
    def run(self, ws, tmp_path, protocol):
        out = tmp_path / protocol.replace(":", "_")
        code = main(["sparsify", "--in", str(ws / "data" / "train.json"), "--protocol", protocol,
                     "--seed", "7", "--out", str(out)])
        assert code == 0
        return load_dataset(out / "train.json"), out

    def test_full_identity(self, ws, tmp_path):
        ds, _ = self.run(ws, tmp_path, "full")
        src = load_dataset(ws / "data" / "train.json")
        for iid in src.image_ids:
            assert ds.labels(iid) == src.labels(iid)

    def test_hard_counts(self, ws, tmp_path):
        ds, out = self.run(ws, tmp_path, "hard")
        src = load_dataset(ws / "data" / "train.json")
        assert ds.num_erased() == sum(len(src.labels(i)) // 2 for i in src.image_ids)
        # tensors stay reachable from the new location
        assert (out / ds.images[0].file_name).exists()

    def test_miss_half(self, ws, tmp_path):
        ds, _ = self.run(ws, tmp_path, "miss:0.5")
        src = load_dataset(ws / "data" / "train.json")
        before = Counter(g.class_id for i in src.image_ids for g in src.labels(i))
        after = Counter(g.class_id for i in ds.image_ids for g in ds.labels(i))
        for c, m in before.items():
            assert after[c] == math.ceil(m / 2)

    def test_bad_protocol(self, ws, tmp_path):
        assert main(["sparsify", "--in", str(ws / "data" / "train.json"), "--protocol", "medium",
                     "--out", str(tmp_path)]) == 2

    def test_missing_input(self, tmp_path):
        assert main(["sparsify", "--in", str(tmp_path / "none.json"), "--protocol", "hard",
                     "--out", str(tmp_path)]) == 4


class TestTrain:
    def test_smoke(self, ws, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(ws / "c.toml"), "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out / "train_log.csv")))
        assert len(rows) == 50
        s = read_json(out / "summary.json")
        assert s["mode"] == "original" and s["status"] == "completed" and s["seed"] == 3
        assert s["protocol"] == "full"
        assert set(s["metrics"]) == {"ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"}
        assert (out / "checkpoints" / "final.bin").exists()
        assert (out / "metrics.json").exists() and (out / "manifest.json").exists()

    def test_prohibitive_tau_matches_joint(self, ws, tmp_path, monkeypatch):
        c = str(ws / "c.toml")
        monkeypatch.setenv("COMINING_TRAIN__MODE", "joint")
        assert main(["train", "--config", c, "--out", str(tmp_path / "j")]) == 0
        monkeypatch.setenv("COMINING_TRAIN__MODE", "comining")
        monkeypatch.setenv("COMINING_TRAIN__COGEN__TAU", "1.1")
        assert main(["train", "--config", c, "--out", str(tmp_path / "c")]) == 0
        sj, sc = read_json(tmp_path / "j" / "summary.json"), read_json(tmp_path / "c" / "summary.json")
        assert sj["metrics"] == sc["metrics"]
        assert ((tmp_path / "j" / "checkpoints" / "final.bin").read_bytes()
                == (tmp_path / "c" / "checkpoints" / "final.bin").read_bytes())

    def test_divergence_exit(self, ws, tmp_path):
        c = cfg_file(tmp_path, "eta0 = 10.0\n", "div.toml")
        Path(c).write_text(Path(c).read_text().replace("n_max = 50", "n_max = 400")
                           .replace('train = "data/train.json"', f'train = "{ws}/data/train.json"')
                           .replace('val = "data/val.json"', f'val = "{ws}/data/val.json"'))
        out = tmp_path / "div"
        assert main(["train", "--config", c, "--out", str(out)]) == 3
        s = read_json(out / "summary.json")
        assert s["status"] == "diverged" and s["metrics"] is None
        rows = list(csv.DictReader(open(out / "train_log.csv")))
        assert len(rows) == s["diverged_at"] + 1 == s["iterations"]

    def test_rerun_identical(self, ws, tmp_path):
        c = str(ws / "c.toml")
        for name in ("a", "b"):
            assert main(["train", "--config", c, "--out", str(tmp_path / name),
                         "--train", str(ws / "data" / "train.json")]) == 0
        for f in ("checkpoints/final.bin", "train_log.csv", "metrics.json", "summary.json",
                  "per_category.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unknown_field(self, ws, tmp_path, capsys):
        c = cfg_file(tmp_path, "learning_rate = 0.1\n", "unk.toml")
        assert main(["train", "--config", c, "--out", str(tmp_path / "u")]) == 2
        assert "train.learning_rate" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 4

    def test_usage(self):
        assert main(["train"]) == 2


class TestEval:
    def test_perfect_detections(self, ws, tmp_path):
        val = load_dataset(ws / "data" / "val.json")
        rows = [{"image_id": g.image_id, "category_id": val.categories[g.class_id].id,
                 "bbox": list(g.bbox.to_xywh()), "score": 1.0}
                for i in val.image_ids for g in val.labels(i)]
        (tmp_path / "d.json").write_text(json.dumps(rows))
        assert main(["eval", "--dataset", str(ws / "data" / "val.json"), "--detections",
                     str(tmp_path / "d.json"), "--out", str(tmp_path / "e")]) == 0
        m = read_json(tmp_path / "e" / "metrics.json")
        assert all(m[k] in (1.0, None) for k in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"))
        assert m["ap"] == 1.0

    def test_empty_detections(self, ws, tmp_path):
        (tmp_path / "d.json").write_text("[]")
        assert main(["eval", "--dataset", str(ws / "data" / "val.json"), "--detections",
                     str(tmp_path / "d.json"), "--out", str(tmp_path / "e")]) == 0
        m = read_json(tmp_path / "e" / "metrics.json")
        assert all(m[k] in (0.0, None) for k in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"))

    def test_library_parity(self, ws, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--config", str(ws / "c.toml"), "--out", str(run)]) == 0
        out = tmp_path / "e"
        assert main(["eval", "--config", str(ws / "c.toml"), "--checkpoint",
                     str(run / "checkpoints" / "final.bin"), "--out", str(out)]) == 0
        val = load_dataset(ws / "data" / "val.json")
        dets = read_results(out / "detections.json", val)
        lib = evaluate(dets, val).to_json()
        assert read_json(out / "metrics.json") == json.loads(json.dumps(lib))
        assert read_json(out / "metrics.json") == read_json(run / "metrics.json")

    def test_needs_one_source(self, ws, tmp_path):
        assert main(["eval", "--dataset", str(ws / "data" / "val.json"), "--out", str(tmp_path)]) == 2


def fake_run(root, name, proto, mode, ap):
    d = root / name
    d.mkdir()
    metrics = None if ap is None else {"ap": ap}
    (d / "summary.json").write_text(json.dumps({"protocol": proto, "mode": mode, "metrics": metrics}))
    (d / "train_log.csv").write_text("iteration,loss,pseudo_o,pseudo_a,lr\n0,1.5,0,0,0.1\n")
    return str(d)


class TestReport:
    def test_single(self, tmp_path):
        run = fake_run(tmp_path, "r", "hard", "original", 0.25)
        assert main(["report", "--out", str(tmp_path / "rep"), run]) == 0
        rows = list(csv.reader(open(tmp_path / "rep" / "table.csv")))
        assert rows == [["protocol", "original"], ["hard", "25.0"]]
        assert (tmp_path / "rep" / "series" / "r.csv").exists()

    def test_grid_and_missing(self, tmp_path):
        runs = []
        protos = ["easy", "hard", "extreme", "miss:0.5"]
        modes = ["comining", "joint", "augmented", "original"]
        for p in protos:
            for m in modes:
                ap = None if (p, m) == ("extreme", "joint") else 0.1
                runs.append(fake_run(tmp_path, f"{p}_{m}".replace(":", ""), p, m, ap))
        runs.append(str(tmp_path / "absent"))
        assert main(["report", "--out", str(tmp_path / "rep")] + runs) == 0
        rows = list(csv.reader(open(tmp_path / "rep" / "table.csv")))
        assert rows[0] == ["protocol", "original", "augmented", "joint", "comining"]
        assert [r[0] for r in rows[1:]] == protos
        assert rows[3][3] == "-"
        assert read_json(tmp_path / "rep" / "report.json")["warnings"] == 2
        md = (tmp_path / "rep" / "table.md").read_text().splitlines()
        assert len(md) == 6


def test_env_override(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nn_max = 5\n")
    cfg = load_config(str(p), {"COMINING_TRAIN__COGEN__TAU": "0.5", "COMINING_TRAIN__MODE": "joint",
                               "OTHER": "x"})
    assert cfg == {"train": {"n_max": 5, "mode": "joint", "cogen": {"tau": 0.5}}}


def test_read_results_rejects_unknown_category(tmp_path, ws):
    val = load_dataset(ws / "data" / "val.json")
    (tmp_path / "d.json").write_text(json.dumps([{"image_id": 1, "category_id": 99,
                                                  "bbox": [0, 0, 1, 1], "score": 0.5}]))
    with pytest.raises(ValueError, match="#0"):
        read_results(tmp_path / "d.json", val)
