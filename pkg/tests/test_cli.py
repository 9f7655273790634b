import json

import pytest

from octcascade import cli

TINY = {"phantom": {"width": 64, "height": 64, "n_train": 4, "n_test": 5},
        "dataprep": {"tile_width": 32, "shift_px": 5},
        "generator": {"levels": 2, "base_width": 4}, "tisn": {"levels": 2, "base_width": 4},
        "discriminator": {"layers": 1, "base_width": 4},
        "training_cgan": {"max_epochs": 1}, "training_tisn": {"max_epochs": 1, "augment_copies": 0}}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*args):
    return cli.main([str(a) for a in args])


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    out = capsys.readouterr().out
    assert "usage" in out and "training_cgan" in out and "exit codes" in out
    assert run("segment", "--help") == 0


def test_usage_errors_exit_one(capsys):
    assert run("frobnicate") == 1
    assert run("synth", "--bogus") == 1
    assert run() == 1
    assert "usage" in capsys.readouterr().err


def test_bad_config_exits_one(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"phantom": {"nope": 1}}))
    assert run("synth", "--config", p, "--out", tmp_path / "o") == 1
    assert run("synth", "--config", tmp_path / "missing.json", "--out", tmp_path / "o") == 1


def test_evaluate_without_curves_exits_two(cfg_path, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("synth", "--config", cfg_path, "--out", out, "--quiet") == 0
    assert run("evaluate", "--config", cfg_path, "--out", out, "--quiet") == 2
    assert "missing curves" in capsys.readouterr().err


def test_out_from_environment(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("OCTCASCADE_OUT", str(tmp_path / "env"))
    assert run("synth", "--config", cfg_path, "--quiet") == 0
    assert (tmp_path / "env" / "data" / "manifest.json").exists()


def test_full_workflow_and_idempotence(cfg_path, tmp_path, capsys):
    out = tmp_path / "o"
    common = ["--config", cfg_path, "--out", out, "--quiet", "--seed", 3]
    assert run("synth", *common) == 0
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest["entries"]) == 9
    first_png = (out / "data" / "images" / (manifest["entries"][0]["id"] + ".png")).read_bytes()
    assert run("prepare", *common) == 0
    assert run("train-cgan", *common) == 0
    assert run("train-tisn", *common) == 0
    for name in ("generator", "tisn", "tisn_direct"):
        assert (out / "checkpoints" / f"{name}.pt").exists()
    assert run("presegment", *common) == 0
    assert len(list((out / "presegs").iterdir())) == 5
    assert run("segment", *common) == 0
    assert run("hybrid", *common) == 0
    assert run("evaluate", *common) == 0
    csv_before = (out / "reports" / "twps.csv").read_bytes()
    assert run("compare", "--config", cfg_path, "--out", out, "--seed", 3) == 0
    assert "p_HD" in capsys.readouterr().out
    assert (out / "summary.json").exists()
    assert len(list((out / "plots").iterdir())) == 4
    # re-running with the same config and seed reproduces identical bytes
    assert run("synth", *common) == 0
    assert (out / "data" / "images" / (manifest["entries"][0]["id"] + ".png")).read_bytes() == first_png
    assert run("hybrid", *common) == 0
    assert run("evaluate", *common, "--baseline", "twps") == 0
    assert (out / "reports" / "twps.csv").read_bytes() == csv_before


def test_explicit_checkpoint_and_baseline(cfg_path, tmp_path):
    out = tmp_path / "o"
    common = ["--config", cfg_path, "--out", out, "--quiet"]
    assert run("synth", *common) == 0
    assert run("prepare", *common) == 0
    assert run("train-tisn", *common, "--baseline", "dlwops") == 0
    ck = out / "checkpoints" / "tisn_direct.pt"
    moved = tmp_path / "elsewhere.pt"
    ck.rename(moved)
    (out / "checkpoints" / "tisn_direct.json").rename(moved.with_suffix(".json"))
    assert run("segment", *common, "--baseline", "dlwops") == 2
    assert run("segment", *common, "--baseline", "dlwops", "--checkpoint", moved) == 0
    assert run("segment", *common, "--baseline", "dlwps") == 2
    assert run("train-tisn", *common, "--baseline", "twops") == 1
