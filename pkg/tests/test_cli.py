import json
from pathlib import Path

import numpy as np
import pytest

from quantnet.cli import dispatch
from quantnet.tmf import read_tmf
from test_data import tree_hash

TRAIN_CONFIG = {
    "image_size": 24,
    "batch_size": 16,
    "val_fraction": 0.25,
    "augment": False,
    "model": {"arch": "small_cnn", "widths": [6, 12], "hidden": 16},
    "stages": [
        {"freeze_backbone": True, "learning_rate": 1e-3, "max_epochs": 2,
         "early_stop": {"patience": 4}},
        {"freeze_backbone": False, "learning_rate": 5e-4, "max_epochs": 3,
         "plateau": {"factor": 0.5, "patience": 4}, "early_stop": {"patience": 8}},
        {"freeze_backbone": False, "learning_rate": 1e-4, "max_epochs": 1,
         "plateau": {"factor": 0.3, "patience": 3}},
    ],
}


def run(capsys, *argv) -> tuple[int, dict, str]:
    code = dispatch([str(a) for a in argv])
    out = capsys.readouterr().out
    last = out.strip().splitlines()[-1] if out.strip() else "{}"
    return code, json.loads(last), out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cliwork")


@pytest.fixture(scope="module")
def data_dir(workdir):
    code = dispatch(["synth", "--out", str(workdir / "data"), "--classes", "4",
                     "--per-class", "24", "--size", "24", "--seed", "7"])
    assert code == 0
    return workdir / "data"


@pytest.fixture(scope="module")
def ckpt_path(workdir, data_dir):
    cfg = workdir / "train.json"
    cfg.write_text(json.dumps(TRAIN_CONFIG))
    out = workdir / "model.tmf"
    code = dispatch(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(out), "--seed", "3"])
    assert code == 0 and out.exists()
    return out


class TestSynth:
    def test_deterministic_trees(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, summary, _ = run(capsys, "synth", "--out", tmp_path / name,
                                   "--classes", 4, "--per-class", 50, "--seed", 7)
            assert code == 0 and summary["classes"] == 4
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
        assert len(list((tmp_path / "a").rglob("*.png"))) == 200


class TestTrainAndEvaluate:
    def test_train_artifact_parses(self, ckpt_path):
        ck = read_tmf(ckpt_path)
        assert ck.optimizer_slots and ck.graph.class_names is not None

    def test_evaluate_writes_reports(self, workdir, data_dir, ckpt_path, capsys):
        rep = workdir / "f32.json"
        cm = workdir / "f32.csv"
        code, summary, out = run(capsys, "evaluate", "--model", ckpt_path,
                                 "--data", data_dir, "--mode", "f32",
                                 "--report", rep, "--confusion", cm, "--seed", 3)
        assert code == 0
        doc = json.loads(rep.read_text())
        assert 0 <= doc["accuracy"] <= 1
        assert summary["accuracy"] == doc["accuracy"]
        assert len(cm.read_text().strip().splitlines()) == 5
        assert "Precision" in out

    def test_evaluate_f16_from_checkpoint(self, workdir, data_dir, ckpt_path, capsys):
        code, summary, _ = run(capsys, "evaluate", "--model", ckpt_path,
                               "--data", data_dir, "--mode", "f16",
                               "--report", workdir / "f16.json", "--seed", 3)
        assert code == 0 and summary["mode"] == "f16"


class TestQuantizeAndReport:
    def test_f16_flow(self, workdir, data_dir, ckpt_path, capsys):
        f16 = workdir / "model_f16.tmf"
        code, summary, _ = run(capsys, "quantize", "--in", ckpt_path,
                               "--mode", "f16", "--out", f16)
        assert code == 0
        assert summary["compressed_bytes"] < summary["original_bytes"]

        for mode, rep in (("f32", "rep32.json"), ("f16", "rep16.json")):
            code, *_ = run(capsys, "evaluate", "--model",
                           ckpt_path if mode == "f32" else f16,
                           "--data", data_dir, "--mode", mode,
                           "--report", workdir / rep, "--seed", 3)
            assert code == 0
        code, summary, out = run(capsys, "report",
                                 "--original", ckpt_path, "--quantized", f16,
                                 "--baseline-report", workdir / "rep32.json",
                                 "--quantized-report", workdir / "rep16.json")
        assert code == 0
        assert summary["compression_ratio"] > 2
        assert "Compression Ratio" in out and "×" in out

    def test_quantize_deterministic(self, workdir, ckpt_path, capsys):
        outs = []
        for name in ("q1.tmf", "q2.tmf"):
            code, _, _ = run(capsys, "quantize", "--in", ckpt_path,
                             "--mode", "f16", "--out", workdir / name)
            assert code == 0
            outs.append((workdir / name).read_bytes())
        assert outs[0] == outs[1]

    def test_int8_flow(self, workdir, data_dir, ckpt_path, capsys):
        int8 = workdir / "model_int8.tmf"
        code, _, _ = run(capsys, "quantize", "--in", ckpt_path, "--mode", "int8",
                         "--calib", data_dir, "--calib-samples", 16,
                         "--out", int8, "--seed", 3)
        assert code == 0
        code, summary, _ = run(capsys, "evaluate", "--model", int8,
                               "--data", data_dir, "--mode", "int8", "--seed", 3)
        assert code == 0 and summary["mode"] == "int8"

    def test_int8_needs_calibration_dir(self, workdir, ckpt_path, capsys):
        code = dispatch(["quantize", "--in", str(ckpt_path), "--mode", "int8",
                         "--out", str(workdir / "x.tmf")])
        assert code == 1


class TestCalibrate:
    def test_writes_stats(self, workdir, data_dir, ckpt_path, capsys):
        stats = workdir / "stats.json"
        code, summary, _ = run(capsys, "calibrate", "--model", ckpt_path,
                               "--data", data_dir, "-n", 8, "--out", stats)
        assert code == 0 and summary["samples"] == 8
        doc = json.loads(stats.read_text())
        assert doc["count"] == 8 and doc["ranges"]


class TestInfer:
    def test_probabilities_and_class(self, data_dir, ckpt_path, capsys):
        image = next((data_dir / "class_0").glob("*.png"))
        code, summary, _ = run(capsys, "infer", "--model", ckpt_path, "--image", image)
        assert code == 0
        probs = summary["probabilities"]
        assert len(probs) == 4
        assert sum(probs) == pytest.approx(1.0, abs=1e-5)
        assert summary["class_name"].startswith("class_")


class TestDistill:
    def test_distill_flow(self, workdir, data_dir, ckpt_path, capsys):
        cfg = workdir / "kd.json"
        cfg.write_text(json.dumps({
            "image_size": 24, "batch_size": 16, "val_fraction": 0.25,
            "augment": False,
            "model": {"arch": "small_cnn", "widths": [4, 8], "hidden": 8},
            "kd": {"temperature": 4.0, "alpha": 0.5},
            "stages": [{"freeze_backbone": False, "learning_rate": 1e-3,
                        "max_epochs": 2}],
        }))
        out = workdir / "student.tmf"
        code, summary, _ = run(capsys, "distill", "--teacher", ckpt_path,
                               "--config", cfg, "--data", data_dir,
                               "--out", out, "--seed", 5)
        assert code == 0 and out.exists()
        assert summary["epochs"] == 2


class TestExitCodes:
    def test_unknown_command_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            dispatch(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            dispatch(["synth", "--bogus", "1"])
        assert exc.value.code == 2

    def test_missing_file_diagnostic(self, capsys):
        code = dispatch(["infer", "--model", "/nonexistent.tmf", "--image", "x.png"])
        assert code == 1
        assert "error:" in capsys.readouterr().err
