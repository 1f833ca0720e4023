import json

import numpy as np
import pytest

from xcap import cli
from xcap.captioner import CaptionerParams, ModelConfig
from xcap.checkpoint import load_checkpoint, save_checkpoint
from xcap.evaluation import read_pgm
from xcap.synthdata import load_dataset

TINY = ["--hidden", "8", "--embed", "8", "--attention", "8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["synth", "--out", str(root / "data"), "--train", "6", "--val", "2", "--test", "4",
                    "--seed", "2"]) == 0
    assert cli.run(["train", "--data", str(root / "data"), "--out", str(root / "m.ckpt"),
                    "--epochs", "1", "--batch", "3", *TINY]) == 0
    return root


def _summary(err: str) -> dict:
    return json.loads(err.strip().splitlines()[-1])


def test_synth_writes_readable_dataset(tmp_path, capsys):
    assert cli.run(["synth", "--out", str(tmp_path), "--train", "3", "--val", "1", "--test", "1"]) == 0
    summary = _summary(capsys.readouterr().err)
    assert summary["command"] == "synth" and summary["status"] == "ok"
    assert len(load_dataset(tmp_path, "train")) == 3


def test_unknown_subcommand_is_usage_error(capsys):
    assert cli.run(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_train_outputs(workspace):
    assert load_checkpoint(workspace / "m.ckpt").config.hidden == 8
    lines = (workspace / "m.ckpt.history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 2


def test_generate_prints_id_and_sentence(workspace, tmp_path, capsys):
    code = cli.run(["generate", "--model", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                    "--ids", "test-00001,test-00003", "--attention-out", str(tmp_path), "--max-len", "5"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["test-00001", "test-00003"]
    assert all(len(ln.split("\t")) == 2 for ln in lines)
    pgms = sorted((tmp_path / "test-00001").glob("*.pgm"))
    assert pgms and all(read_pgm(p).shape == (8, 8) for p in pgms)


def test_generate_unknown_id(workspace, capsys):
    code = cli.run(["generate", "--model", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                    "--ids", "test-99999"])
    assert code == 1
    assert "test-99999" in capsys.readouterr().err


def test_eval_writes_report(workspace, tmp_path, capsys):
    out = tmp_path / "r.json"
    code = cli.run(["eval", "--model", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                    "--out", str(out), "--attention-out", str(tmp_path / "att")])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["n_records"] == 4
    assert _summary(capsys.readouterr().err)["command"] == "eval"
    for d in (tmp_path / "att").iterdir():
        for csv in d.glob("[0-9]*.csv"):
            assert abs(np.loadtxt(csv, delimiter=",").sum() - 1) < 1e-6


def test_eval_vocab_mismatch(workspace, tmp_path, capsys):
    cfg = ModelConfig(vocab_size=30, hidden=8, embed=8, attention=8)
    save_checkpoint(CaptionerParams.init(cfg, seed=0), tmp_path / "k30.ckpt")
    code = cli.run(["eval", "--model", str(tmp_path / "k30.ckpt"), "--data", str(workspace / "data"),
                    "--out", str(tmp_path / "r.json")])
    assert code == 1
    err = capsys.readouterr().err
    assert "K=30" in err and "K=32" in err


def test_missing_data_dir_is_runtime_error(tmp_path, capsys):
    assert cli.run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_config_precedence(tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"out": str(tmp_path / "d"), "train": 2, "val": 1, "test": 1, "seed": 7}))
    assert cli.run(["synth", "--config", str(config), "--train", "4"]) == 0
    summary = _summary(capsys.readouterr().err)
    assert summary["records"] == 6
    assert len(load_dataset(tmp_path / "d", "train")) == 4


def test_config_unknown_key(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"out": str(tmp_path / "d"), "colour": "blue"}))
    assert cli.run(["synth", "--config", str(config)]) == 2


def test_gradcheck_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(cli, "check_captioner_gradients", lambda seed, eps: {"a": 1e-7, "b": 3e-6})
    assert cli.run(["gradcheck"]) == 0
    assert "max relative error 3.000e-06" in capsys.readouterr().out
    monkeypatch.setattr(cli, "check_captioner_gradients", lambda seed, eps: {"a": 1e-3})
    assert cli.run(["gradcheck"]) == 1
