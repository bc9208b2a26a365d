import json

import pytest

from posedesc import cli

TINY_NET = {"coarse_stride": 4, "fine_stride": 2, "coarse_dim": 8, "fine_dim": 8, "widths": [4, 6, 8],
            "fine_hidden": 4, "window_fraction": 0.5}


def run(*argv):
    return cli.main([str(a) for a in argv])


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_help_and_usage_errors(capsys):
    assert run("--help") == 0
    assert run() == 1
    assert run("bogus") == 1
    assert run("train", "--epochs", "x") == 1
    assert run("eval", "--data", "d", "--report", "r.json") == 1     # no model chosen


def test_runtime_error_exit_code(tmp_path):
    assert run("eval", "--oracle", "--data", tmp_path / "missing", "--report", tmp_path / "r.json") == 2


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert run("gen-data", "--count", "1", "--out", tmp_path / "x") == 1


def test_gen_data_is_deterministic(tmp_path):
    args = ["gen-data", "--count", "2", "--size", "32", "--seed", "4"]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b", "--threads", "1") == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_train_resume_match_eval(tmp_path):
    assert run("gen-data", "--count", "2", "--size", "32", "--geometry", "facade", "--out", tmp_path / "d") == 0
    cfg = {"net": TINY_NET, "queries": 8, "lr": 1e-3, "val_pairs": 2, "epochs": 1}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert run("train", "--config", tmp_path / "cfg.json", "--data", tmp_path / "d", "--val-data", tmp_path / "d",
               "--out", tmp_path / "run") == 0
    assert (tmp_path / "run" / "final.ckpt").exists()
    assert run("resume", "--ckpt", tmp_path / "run" / "epoch_001.ckpt", "--epochs", "2") == 0
    assert (tmp_path / "run" / "log.csv").read_text().count("\n") == 3
    assert run("resume", "--ckpt", tmp_path / "run" / "epoch_001.ckpt", "--epochs", "2", "--lr", "0.5") == 2

    img = tmp_path / "d" / "pairs" / "0000"
    assert run("match", "--ckpt", tmp_path / "run" / "final.ckpt", "--img1", img / "img1.pgm", "--img2",
               img / "img2.pgm", "--dense", "--grid-step", "8", "--out", tmp_path / "m.txt") == 0
    lines = [l for l in (tmp_path / "m.txt").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 16 and len(lines[0].split()) == 4

    assert run("eval", "--ckpt", tmp_path / "run" / "final.ckpt", "--data", tmp_path / "d",
               "--report", tmp_path / "rep.json") == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert len(rep["pck"]) == 6 and "chance" in rep
    assert (tmp_path / "rep.csv").exists()
    assert run("eval", "--oracle", "--data", tmp_path / "d", "--report", tmp_path / "o.json") == 0
    assert json.loads((tmp_path / "o.json").read_text())["pck"][0] == 1.0


def test_ablate_subset(tmp_path):
    assert run("gen-data", "--count", "2", "--size", "32", "--out", tmp_path / "d") == 0
    cfg = {"net": TINY_NET, "queries": 8, "lr": 1e-3, "val_pairs": 0, "epochs": 1, "dataset": str(tmp_path / "d")}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert run("ablate", "--config", tmp_path / "cfg.json", "--eval-data", tmp_path / "d", "--variants",
               "full,no_cycle", "--out", tmp_path / "abl", "--report", tmp_path / "t.json") == 0
    table = json.loads((tmp_path / "t.json").read_text())
    assert set(table) == {"full", "no_cycle"}
    assert run("ablate", "--config", tmp_path / "cfg.json", "--eval-data", tmp_path / "d", "--variants", "nope",
               "--report", tmp_path / "t2.json") == 1


def test_gradcheck_ops_only():
    assert run("gradcheck", "--instances", "2", "--no-pipeline") == 0
