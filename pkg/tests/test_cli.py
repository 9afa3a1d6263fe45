import csv
import json

import numpy as np
import pytest

from alesal.cli import build_parser, main

SMALL = ["--subcarriers", "16"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--per-class", 3, "--seed", 7, "--out", root / "train", *SMALL) == 0
    assert run("synth", "--per-class", 2, "--seed", 8, "--out", root / "test", *SMALL) == 0
    assert run("preprocess", "--data", root / "train", "--out", root / "train.alpp") == 0
    assert run("train", "--data", root / "train.alpp", "--out", root / "m.ckpt", "--seed", 1, "--epochs", 2,
               "--history", root / "history.csv") == 0
    return root


def test_synth_writes_sessions_and_labels(workspace):
    names = sorted(p.name for p in (workspace / "train").iterdir())
    assert len(names) == 27
    assert names[:3] == ["session_0000.csis.gz", "session_0000.labels", "session_0000.scenario.json"]
    assert (workspace / "train" / "session_0008.labels").read_text() == "0.0 20.0 plmd\n"


def test_synth_rerun_is_byte_identical(workspace, tmp_path):
    assert run("synth", "--per-class", 3, "--seed", 7, "--out", tmp_path, *SMALL) == 0
    for p in (workspace / "train").iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_train_from_directory_matches_blob(workspace, tmp_path):
    assert run("train", "--data", workspace / "train", "--out", tmp_path / "m.ckpt", "--seed", 1, "--epochs", 2) == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (workspace / "m.ckpt").read_bytes()
    rows = list(csv.DictReader((workspace / "history.csv").open()))
    assert [r["epoch"] for r in rows] == ["1", "2"]


def test_eval_report_and_floor(workspace, capsys):
    out = workspace / "report.csv"
    assert run("eval", "--model", workspace / "m.ckpt", "--data", workspace / "test", "--out", out) == 0
    assert "weighted_f1" in capsys.readouterr().out
    lines = out.read_text().splitlines()
    assert lines[0] == "metric,class,value" and lines[1].startswith("accuracy,all,")
    assert run("eval", "--model", workspace / "m.ckpt", "--data", workspace / "test", "--min-accuracy", 101) == 3


def test_infer_lists_every_window(workspace, tmp_path):
    out = tmp_path / "pred.csv"
    assert run("infer", "--model", workspace / "m.ckpt", "--data", workspace / "test", "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 6
    for r in rows:
        probs = [float(r[k]) for k in ("p_normal", "p_apnea", "p_plmd")]
        assert sum(probs) == pytest.approx(1.0, abs=1e-5)
        assert r["predicted"] in ("normal", "apnea", "plmd")


def test_inspect_attention_dumps(workspace, tmp_path):
    assert run("inspect-attention", "--model", workspace / "m.ckpt", "--data", workspace / "test", "--window", 3,
               "--out", tmp_path) == 0
    ta = list(csv.DictReader((tmp_path / "ta_attention.csv").open()))
    pa = list(csv.DictReader((tmp_path / "pa_attention.csv").open()))
    assert {r["window_id"] for r in ta} == {"3"} and len(ta) == 4 * 11 * 11
    assert len(pa) == 64
    sums = {}
    for r in ta:
        key = (r["pair"], r["frame_i"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
    np.testing.assert_allclose(list(sums.values()), 1.0, atol=1e-6)
    assert all(0 < float(r["weight"]) < 1 for r in pa)
    assert run("inspect-attention", "--model", workspace / "m.ckpt", "--data", workspace / "test", "--window", 99,
               "--out", tmp_path) == 1


def test_config_precedence(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "seed": 1}))
    assert run("train", "--config", cfg, "--data", workspace / "train.alpp", "--out", tmp_path / "a.ckpt",
               "--history", tmp_path / "a.csv") == 0
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 2
    assert run("train", "--config", cfg, "--epochs", 2, "--data", workspace / "train.alpp", "--out",
               tmp_path / "b.ckpt") == 0
    assert (tmp_path / "b.ckpt").read_bytes() == (workspace / "m.ckpt").read_bytes()
    cfg.write_text(json.dumps({"epoch": 1}))
    assert run("train", "--config", cfg, "--data", workspace / "train.alpp", "--out", tmp_path / "c.ckpt") == 2


def test_usage_and_pipeline_errors(workspace, tmp_path, capsys):
    assert run("train", "--bogus") == 2
    assert run("frobnicate") == 2
    assert run("synth", "--out", tmp_path, "--band", "x") == 2
    assert run("eval", "--model", tmp_path / "missing.ckpt", "--data", workspace / "test") == 1
    assert "alesal" in capsys.readouterr().err
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    assert run("eval", "--model", tmp_path / "junk.ckpt", "--data", workspace / "test") == 1
    assert "alesal.nn.checkpoint: error" in capsys.readouterr().err


def test_every_subcommand_has_help(capsys):
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    assert set(commands) == {"synth", "preprocess", "train", "eval", "infer", "ablate", "inspect-attention"}
    for name in commands:
        assert main([name, "--help"]) == 0
    assert "--window-sec" in capsys.readouterr().out


def test_dmlp_and_ablate(workspace, tmp_path):
    assert run("train", "--model", "dmlp", "--data", workspace / "train.alpp", "--out", tmp_path / "d.ckpt",
               "--epochs", 2) == 0
    assert run("eval", "--model", tmp_path / "d.ckpt", "--data", workspace / "test") == 0
    assert run("ablate", "--data", workspace / "train.alpp", "--test", workspace / "test", "--out", tmp_path / "abl",
               "--epochs", 1, "--with-baseline") == 0
    rows = list(csv.DictReader((tmp_path / "abl" / "ablation.csv").open()))
    assert [r["variant"] for r in rows] == ["full", "ta_only", "pa_only", "none", "dmlp"]


def test_pipeline_flags_change_shapes(workspace, tmp_path):
    assert run("preprocess", "--data", workspace / "test", "--out", tmp_path / "f.alpp", "--window-sec", 10,
               "--tau", 5, "--band", "0.2:1.5") == 0
    from alesal.features import loads

    fs = loads((tmp_path / "f.alpp").read_bytes())
    assert fs.series.shape == (12, 4, 100) and fs.spectrograms.shape == (12, 4, 6, 26)
    assert fs.params.band == (0.2, 1.5)
