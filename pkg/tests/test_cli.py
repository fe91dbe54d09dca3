import csv
import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import NINE_VERTEX_TOUR, nine_vertex_tree
from toponet import cli
from toponet import neuralnet as nn
from toponet import topology as topo

TINY = {
    "num_landmarks": 6,
    "num_classes": 3,
    "samples_per_class": 8,
    "image_size": 24,
    "patch_size": 5,
    "hidden_dim": 6,
    "stream_embed_dim": 4,
    "fusion_dim": 4,
    "inner_epochs": 1,
    "batch_size": 8,
    "iterations": 2,
    "swarm_size": 2,
    "group_sizes": [1, 5],
    "random_trees": 2,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(dict(TINY, dataset=str(root / "data"), out=str(root / "run"))))
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return root, cfg


def test_synth_rows_and_reproducible(workspace, tmp_path):
    root, cfg = workspace
    lines = (root / "data" / "landmarks.csv").read_text().splitlines()
    assert len(lines) == 1 + 8 * 3
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert filecmp.cmp(root / "data" / "landmarks.csv", tmp_path / "again" / "landmarks.csv", shallow=False)


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    for name in ("config.json", "history.csv", "best_tree.json", "checkpoint.json", "metrics.json", "random_baseline.csv"):
        assert (run / name).exists(), name
    snap = json.loads((run / "config.json").read_text())
    assert "workers" not in snap and "out" not in snap and snap["seed"] == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert 0 <= metrics["validation"]["rr"] <= 1
    assert metrics["tree"] == topo.tree_digest(topo.tree_from_json((run / "best_tree.json").read_text()))
    assert metrics["random_baseline"]["count"] == 2
    rows = list(csv.reader(open(run / "random_baseline.csv")))
    assert rows[0] == ["kind", "tree", "rr"] and len(rows) == 3


def test_resume_is_noop(workspace, capsys):
    root, cfg = workspace
    before = (root / "run" / "metrics.json").stat().st_mtime_ns
    assert cli.main(["train", "--config", str(cfg), "--resume"]) == 0
    assert "already complete" in capsys.readouterr().err
    assert (root / "run" / "metrics.json").stat().st_mtime_ns == before
    # a different config must not silently reuse the run
    assert cli.main(["train", "--config", str(cfg), "--resume", "--seed", "3"]) == 1


def test_eval_and_confusion(workspace, capsys, tmp_path):
    root, _ = workspace
    run = root / "run"
    conf = tmp_path / "conf.csv"
    args = ["eval", "--checkpoint", str(run / "checkpoint.json"), "--tree", str(run / "best_tree.json"),
            "--dataset", str(root / "data"), "--confusion-csv", str(conf)]
    assert cli.main(args) == 0
    out = json.loads(capsys.readouterr().out)
    mat = np.loadtxt(conf, delimiter=",", dtype=int)
    assert mat.tolist() == out["confusion"] and mat.sum() == 24
    # the checkpoint refers to 6 landmarks; a 9-vertex tree is refused
    bad = tmp_path / "t9.json"
    bad.write_text(topo.tree_to_json(nine_vertex_tree()))
    args[4] = str(bad)
    assert cli.main(args[:7]) == 1


def test_tree_command(workspace, capsys, tmp_path):
    path = tmp_path / "t.json"
    path.write_text(topo.tree_to_json(nine_vertex_tree()))
    assert cli.main(["tree", str(path)]) == 0
    out = capsys.readouterr().out
    assert "n 9" in out and "max_degree 3" in out
    assert f"traversal {NINE_VERTEX_TOUR}" in out
    assert cli.main(["tree", str(path), "--dot"]) == 0
    assert capsys.readouterr().out.count(" -- ") == 8
    path.write_text("{not json")
    assert cli.main(["tree", str(path)]) == 1


def test_baseline_modes(workspace, capsys, tmp_path):
    root, cfg = workspace
    out = tmp_path / "b.csv"
    assert cli.main(["baseline", "--config", str(cfg), "--random-trees", "2", "--out", str(out)]) == 0
    assert "spread=" in capsys.readouterr().err
    assert out.read_text() == (root / "run" / "random_baseline.csv").read_text()
    assert cli.main(["baseline", "--config", str(cfg), "--human-tree", "chain"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[1].startswith("human,")
    assert cli.main(["baseline", "--config", str(cfg), "--cross-tree", str(root / "run" / "best_tree.json")]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("cross,")
    assert cli.main(["baseline", "--config", str(cfg), "--random-trees", "1"]) == 1


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden_size": 4}))
    assert cli.main(["synth", "--config", str(cfg)]) == 1
    assert "unknown config key 'hidden_size'" in capsys.readouterr().err
    cfg.write_text(json.dumps({"dataset": str(tmp_path / "missing")}))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--max-entries", "6"]) == 0
    assert "-> PASS" in capsys.readouterr().out


def test_gradcheck_catches_injected_bug(monkeypatch, capsys):
    orig = nn.avgpool2_backward
    monkeypatch.setattr(nn, "avgpool2_backward", lambda cache, d: 1.5 * orig(cache, d))
    assert cli.main(["gradcheck", "--max-entries", "6"]) == 2
    assert "-> FAIL" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "toponet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
