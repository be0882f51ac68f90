from __future__ import annotations

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from archsleuth import pipeline
from archsleuth.cli import main
from archsleuth.graph import LayerKind
from archsleuth.identifier.metrics import label_error_rate

TINY = ["--set", "train.hidden_dim=8", "--set", "eval.noise_seeds=2", "--set", "eval.chain_graphs=3",
        "--set", "eval.dims_graphs=1", "--set", "eval.sweep_graphs=2", "--set", "eval.train_subset=2",
        "--set", "mlp.epochs=2"]


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["gen", "--out", str(root / "ds"), "--count", "6", "--seed", "3", "--traces"]) == 0
    assert main(["train", "--dataset", str(root / "ds"), "--out", str(root / "model"),
                 "--epochs", "1", *TINY]) == 0
    return root


def test_gen_is_byte_deterministic(tmp_path, run_dir):
    assert main(["gen", "--out", str(tmp_path / "b"), "--count", "6", "--seed", "3", "--traces"]) == 0
    assert _tree(run_dir / "ds") == _tree(tmp_path / "b")


def test_thread_count_does_not_change_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("ARCHSLEUTH_THREADS", "1")
    assert main(["gen", "--out", str(tmp_path / "one"), "--count", "4"]) == 0
    monkeypatch.setenv("ARCHSLEUTH_THREADS", "2")
    assert main(["gen", "--out", str(tmp_path / "two"), "--count", "4"]) == 0
    assert _tree(tmp_path / "one") == _tree(tmp_path / "two")
    monkeypatch.setenv("ARCHSLEUTH_THREADS", "zero")
    assert main(["gen", "--out", str(tmp_path / "bad"), "--count", "4"]) == 2


def test_manifest_lists_existing_paths_seeds_and_splits(run_dir):
    for sub in ("ds", "model"):
        m = json.loads((run_dir / sub / "manifest.json").read_text())
        base = run_dir / sub
        for rel in [m["dataset"], m["checkpoint"], *m["files"]]:
            if rel is not None:
                assert (base / rel).exists(), rel
    m = json.loads((run_dir / "ds" / "manifest.json").read_text())
    assert [s["split"] for s in m["samples"]].count("val") >= 1
    assert len({s["seed"] for s in m["samples"]}) == len(m["samples"]) == 6
    assert len(m["config_hash"]) == 16


@pytest.mark.parametrize("argv", [
    ["gen", "--out", "{tmp}/x", "--count", "0"],
    ["gen", "--out", "{tmp}/x", "--set", "gen.no_such_key=1"],
    ["gen", "--out", "{tmp}/x", "--set", "nokeyvalue"],
    ["gen", "--out", "{tmp}/x", "--set", "eval.noise_levels=[0.1,0.05]"],
    ["gen", "--out", "{tmp}/x", "--split", "1.5"],
    ["frobnicate"],
    ["train", "--dataset", "{tmp}/missing", "--out", "{tmp}/m"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    assert main([a.replace("{tmp}", str(tmp_path)) for a in argv]) == 2


def test_config_file_and_override_precedence(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"epochs": 7, "lr": 0.01}}))
    cfg = pipeline.load_config(p, ["train.epochs=3"])
    assert cfg["train"]["epochs"] == 3 and cfg["train"]["lr"] == 0.01
    assert cfg["train"]["batch_size"] == pipeline.default_config()["train"]["batch_size"]
    assert pipeline.config_hash(cfg) != pipeline.config_hash(pipeline.default_config())


def test_extract_writes_all_steps(run_dir, tmp_path, capsys):
    trace = next((run_dir / "ds").glob("*.trace"))
    out = tmp_path / "x"
    rc = main(["extract", "--trace", str(trace), "--checkpoint", str(run_dir / "model" / "checkpoint.json"),
               "--out", str(out), "--noise", "0.05"])
    assert rc == 0
    assert (out / "step1_sequence.tsv").read_text().startswith("kernel\tlayer\tkind\n")
    json.loads((out / "step2_topology.json").read_text())
    dims = (out / "step3_dims.tsv").read_text().splitlines()
    assert dims[0].split("\t")[2] == "widened" and dims[1] == "#dims v1"
    assert not list(out.glob(".*tmp"))


def test_truncated_trace_exits_4_with_line(run_dir, tmp_path, capsys):
    trace = next((run_dir / "ds").glob("*.trace"))
    lines = trace.read_text().splitlines()
    bad = tmp_path / "bad.trace"
    bad.write_text("\n".join(lines[:40] + [lines[40][: len(lines[40]) // 2]]) + "\n")
    rc = main(["extract", "--trace", str(bad), "--checkpoint", str(run_dir / "model" / "checkpoint.json"),
               "--out", str(tmp_path / "x")])
    assert rc == 4
    assert "line 41" in capsys.readouterr().err


def test_stats_mismatch_exits_5(run_dir, tmp_path):
    other = tmp_path / "other"
    assert main(["gen", "--out", str(other), "--count", "6", "--seed", "11"]) == 0
    rc = main(["eval", "--dataset", str(other), "--checkpoint", str(run_dir / "model" / "checkpoint.json"),
               "--out", str(tmp_path / "e"), *TINY])
    assert rc == 5
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["extract", "--trace", str(next((run_dir / "ds").glob("*.trace"))),
                 "--checkpoint", str(bad), "--out", str(tmp_path / "x")]) == 5


def test_divergence_exits_3(run_dir, tmp_path):
    ds = tmp_path / "ds"
    assert main(["gen", "--out", str(ds), "--count", "4", "--seed", "3"]) == 0
    for f in ds.glob("*.features.tsv"):
        rows = f.read_text().splitlines()
        f.write_text("\n".join(r if r.startswith("#") else "\t".join(["nan"] * len(r.split("\t")))
                               for r in rows) + "\n")
    assert main(["train", "--dataset", str(ds), "--out", str(tmp_path / "m"), "--epochs", "1", *TINY]) == 3


def test_corrupt_dataset_file_exits_4(tmp_path):
    ds = tmp_path / "ds"
    assert main(["gen", "--out", str(ds), "--count", "4"]) == 0
    next(ds.glob("*.features.tsv")).write_text("garbage\n")
    assert main(["train", "--dataset", str(ds), "--out", str(tmp_path / "m"), "--epochs", "1"]) == 4


def test_eval_metrics_tables(run_dir, tmp_path, capsys):
    out = tmp_path / "e"
    assert main(["eval", "--dataset", str(run_dir / "ds"), "--checkpoint",
                 str(run_dir / "model" / "checkpoint.json"), "--out", str(out), *TINY]) == 0
    text = (out / "metrics.tsv").read_text()
    for sec in ("#ler_per_corpus", "#noise_sweep", "#model_comparison", "#structure"):
        assert sec in text
    block = text.split("#noise_sweep\n")[1].split("\n\n")[0].splitlines()[1:]
    levels = [float(r.split("\t")[0]) for r in block]
    assert levels == sorted(levels) == [0, 5, 10, 15, 30]
    m = json.loads((out / "manifest.json").read_text())
    assert 0 <= m["metrics"]["ler_val"] and m["metrics"]["topology_edge_exact"] == 1.0


def test_all_correct_corpus_has_zero_ler(run_dir):
    entries = pipeline.load_dataset(run_dir / "ds")
    preds = [list(layer) for layer in (e.graph.kinds() for e in entries)]
    assert pipeline.sequences_ler(preds, entries) == 0.0
    assert label_error_rate([[LayerKind.CONV]], [[LayerKind.CONV, LayerKind.RELU]]) == 0.5


def test_atomic_write_keeps_old_file_on_failure(tmp_path, monkeypatch):
    p = tmp_path / "f.txt"
    pipeline.atomic_write(p, "old")

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        pipeline.atomic_write(p, "new")
    assert p.read_text() == "old"
    assert [x.name for x in tmp_path.iterdir()] == ["f.txt"]


def test_parallel_map_preserves_order():
    assert pipeline.parallel_map(abs, [-3, 2, -1, 0], threads=2) == [3, 2, 1, 0]


def test_console_script_smoke(tmp_path):
    r = subprocess.run([sys.executable, "-m", "archsleuth.cli", "gen", "--out", str(tmp_path / "g"),
                        "--count", "0"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage error" in r.stderr
