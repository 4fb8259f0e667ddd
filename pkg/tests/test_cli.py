import csv
import hashlib
import subprocess
import sys
from pathlib import Path

import pytest

from cshift.cli import main

TINY = """\
dataset:
  n_samples: 12
  scene: {h: 16, w: 16}
tasks: [rgb, grayscale, depth, seg]
training: {epochs: 2, arch: patch_linear}
experiments:
  node_sweep: {orderings: [random]}
  mmd: {samples: 4, trials: 2, feature_epochs: 1}
  weak_expert: {levels: [0.1]}
"""


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def test_gen_dataset_layout_and_hash(tmp_path):
    cfg = tmp_path / "four.yaml"
    cfg.write_text("dataset: {n_samples: 4, scene: {h: 16, w: 16}}\n"
                   "tasks: [rgb, depth, seg]\nn_iters: 1\n")
    assert main(["gen-dataset", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-dataset", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    samples = [d for d in (tmp_path / "a").glob("*/*") if d.is_dir()]
    assert len(samples) == 4
    for d in samples:
        assert sorted(p.name for p in d.iterdir()) == ["depth.csmap", "rgb.csmap", "seg.csmap"]
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_unknown_key_exits_2_naming_key(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("dataset: {scene: {colour: red}}\n")
    proc = subprocess.run([sys.executable, "-m", "cshift.cli", "gen-dataset", "--config",
                           str(cfg), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "dataset.scene.colour" in proc.stderr
    assert not (tmp_path / "o").exists()


def test_exit_codes(tmp_path, config):
    assert main(["run", "--config", str(config), "--dataset", str(tmp_path / "none"),
                 "--out", str(tmp_path / "r")]) == 3
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["run", "--config", str(config), "--iters", "-1"]) == 2
    assert main(["run", "--config", str(config), "--workers", "0"]) == 2
    assert main(["compare", str(tmp_path), "--out", str(tmp_path / "c.csv")]) == 3


def test_zero_iterations_is_expert_only(tmp_path, config):
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "r"),
                 "--iters", "0"]) == 0
    got = rows(tmp_path / "r" / "metrics.csv")
    assert {r["method"] for r in got} == {"expert"}
    assert {r["task"] for r in got} == {"grayscale", "depth", "seg"}


def test_run_rerun_identical_and_compare(tmp_path, config, monkeypatch):
    ds = tmp_path / "ds"
    assert main(["gen-dataset", "--config", str(config), "--out", str(ds)]) == 0
    runs = {}
    for name, metric, workers in (("l1", "l1", "1"), ("l1b", "l1", "2"), ("perc", "perc", "1")):
        monkeypatch.setenv("CSHIFT_WORKERS", workers)
        out = tmp_path / name
        assert main(["run", "--config", str(config), "--dataset", str(ds), "--out", str(out),
                     "--metric", metric]) == 0
        runs[name] = out
    a, b = runs["l1"], runs["l1b"]
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert tree_hash(a / "iter2" / "labels") == tree_hash(b / "iter2" / "labels")
    assert (a / "iter2" / "edges").is_dir() and (a / "edge_improvement.csv").exists()
    table = tmp_path / "cmp.csv"
    assert main(["compare", str(runs["l1"]), str(runs["perc"]), "--out", str(table)]) == 0
    got = rows(table)
    for task in ("grayscale", "depth", "seg"):
        assert sorted(r["metric"] for r in got if r["task"] == task) == ["l1", "perceptual"]


def test_experiments(tmp_path, config):
    out = tmp_path / "x"
    assert main(["experiment", "node-sweep", "--config", str(config), "--out", str(out)]) == 0
    sweep = rows(out / "node_sweep.csv")
    assert [int(r["n_nodes"]) for r in sweep] == [2, 3, 4]
    assert main(["experiment", "weak-expert", "--config", str(config), "--out", str(out)]) == 0
    weak = rows(out / "weak_expert.csv")
    assert len(weak) == 1 and "boost_pct" in weak[0]
    assert main(["experiment", "ablation", "--config", str(config), "--out", str(out)]) == 0
    assert len(rows(out / "ablation.csv")) == 6
    assert main(["experiment", "mmd", "--config", str(config), "--out", str(out)]) == 0
    mmd = rows(out / "mmd.csv")
    assert len(mmd) == 2 * 2 * 2
    assert {r["representation"] for r in mmd} == {"raw", "features"}
    assert {r["domain_b"] for r in mmd} == {"A'#0", "B#0", "A'#1", "B#1"}
    for name in ("node_sweep.svg", "weak_expert.svg", "ablation.svg", "mmd.svg"):
        assert (out / name).read_text().startswith("<svg")


def test_node_sweep_three_tasks(tmp_path):
    cfg = tmp_path / "three.yaml"
    cfg.write_text(TINY.replace("[rgb, grayscale, depth, seg]", "[rgb, grayscale, depth]"))
    assert main(["experiment", "node-sweep", "--config", str(cfg), "--out",
                 str(tmp_path / "x")]) == 0
    assert [int(r["n_nodes"]) for r in rows(tmp_path / "x" / "node_sweep.csv")] == [2, 3]
