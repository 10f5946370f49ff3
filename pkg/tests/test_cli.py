"""Command-line surface: subcommands, exit codes, error format."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from msfcn.cli import main
from msfcn.model import toy_config
from msfcn.train import TrainConfig, save_train_config


def run_cli(*argv):
    return main(list(argv))


def file_hashes(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_tiny_config(path: Path, **overrides) -> TrainConfig:
    cfg = TrainConfig(model=toy_config(), max_iter=3, batch_size=2, seed=1, **overrides)
    save_train_config(cfg, path)
    return cfg


def synth_tiny(tmp_path: Path, name="data", n=4, test=0, seed=1) -> Path:
    out = tmp_path / name
    assert run_cli(
        "synth", "--n", str(n), "--seed", str(seed), "--out", str(out),
        "--image-size", "36", "--test", str(test),
    ) == 0
    return out / "manifest.json"


class TestSynth:
    def test_deterministic_outputs(self, tmp_path):
        synth_tiny(tmp_path, "a", seed=7)
        synth_tiny(tmp_path, "b", seed=7)
        assert file_hashes(tmp_path / "a") == file_hashes(tmp_path / "b")

    def test_split_flag(self, tmp_path):
        manifest = synth_tiny(tmp_path, n=5, test=2)
        doc = json.loads(manifest.read_text())
        splits = [e["split"] for e in doc["entries"]]
        assert splits.count("test") == 2 and splits.count("train") == 3


class TestAugment:
    def test_forty_fold(self, tmp_path):
        out = tmp_path / "ph"
        assert run_cli("synth", "--n", "2", "--seed", "3", "--out", str(out),
                       "--image-size", "128") == 0
        aug = tmp_path / "aug"
        assert run_cli("augment", "--in", str(out / "manifest.json"), "--out", str(aug)) == 0
        doc = json.loads((aug / "manifest.json").read_text())
        assert len(doc["entries"]) == 80
        ids = [e["id"] for e in doc["entries"]]
        assert len(set(ids)) == 80


class TestDescribe:
    def test_default_layer_table(self, capsys):
        assert run_cli("describe", "--config", "default") == 0
        out = capsys.readouterr().out
        assert "bottleneck" in out
        assert "256x9x9" in out  # the 9x9 bottleneck row

    def test_config_file(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        write_tiny_config(cfg_path)
        assert run_cli("describe", "--config", str(cfg_path)) == 0
        assert "8x3x3" in capsys.readouterr().out  # toy bottleneck: 8 channels at 3x3


class TestGradcheckCommand:
    def test_per_op_rows(self, capsys):
        assert run_cli("gradcheck", "--skip-model") == 0
        out = capsys.readouterr().out
        for op in ("conv2d", "deconv2d", "maxpool2d", "batchnorm2d_train", "softmax_cross_entropy"):
            assert op in out
        assert "FAIL" not in out


class TestTrainEval:
    def test_end_to_end(self, tmp_path, capsys):
        manifest = synth_tiny(tmp_path, n=4)
        cfg_path = tmp_path / "cfg.json"
        write_tiny_config(cfg_path, train_manifest=str(manifest))
        run = tmp_path / "run"
        assert run_cli("train", "--config", str(cfg_path), "--out", str(run)) == 0
        ckpt = run / "checkpoint_final.msfc"
        assert ckpt.exists()
        assert (run / "training_log.csv").exists()

        test_manifest = synth_tiny(tmp_path, "testset", n=3, test=3, seed=9)
        rep = tmp_path / "report"
        assert run_cli(
            "eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
            "--manifest", str(test_manifest), "--split", "test", "--out", str(rep),
        ) == 0
        assert (rep / "report.csv").exists()
        table = (rep / "report.txt").read_text()
        assert "Dice" in table and "Good Contours(%)" in table

    def test_ablate_structure(self, tmp_path, capsys):
        manifest = synth_tiny(tmp_path, n=3)
        test_manifest = synth_tiny(tmp_path, "testset", n=2, test=2, seed=5)
        cfg_path = tmp_path / "cfg.json"
        write_tiny_config(cfg_path, max_iter=1, train_manifest=str(manifest),
                          test_manifest=str(test_manifest))
        out = tmp_path / "ab"
        assert run_cli("ablate", "--suite", "dense_decoder", "--config", str(cfg_path),
                       "--out", str(out)) == 0
        table = (out / "ablation_dense_decoder.txt").read_text()
        assert "Without" in table and "With" in table
        assert "data hashes" in capsys.readouterr().out


class TestErrors:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("describe", "--frobnicate")
        assert exc.value.code == 2

    def test_engine_error_is_single_json_line(self, tmp_path, capsys):
        bad = tmp_path / "nope.json"
        bad.write_text('{"entries": "not-a-list"}')
        code = run_cli("augment", "--in", str(bad), "--out", str(tmp_path / "x"))
        assert code == 1
        err_lines = [l for l in capsys.readouterr().err.splitlines() if l.strip()]
        assert len(err_lines) == 1
        parsed = json.loads(err_lines[0])
        assert parsed["error"] and parsed["message"]

    def test_missing_file_is_reported(self, tmp_path, capsys):
        code = run_cli("train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path))
        assert code == 1
        assert json.loads(capsys.readouterr().err.strip())["error"] == "FileNotFound"
