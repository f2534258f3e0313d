import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from cubemix.checkpoint import save_checkpoint
from cubemix.cli import main, read_pgm, write_pgm
from cubemix.data import RawSample, synth_dataset, write_dataset, write_sample
from cubemix.gradcheck import LAYER_TYPES
from cubemix.layers import init_params, reference_config

SMALL_MODEL = {"input_shape": [8, 3, 4], "l_out": [8, 8], "m_out": [3, 3], "d_out": [4, 4]}


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_config(path, dataset="data", **train):
    train = {"epochs": 3, "batch_size": 8, **train}
    path.write_text(json.dumps({"model": SMALL_MODEL, "train": train, "dataset": dataset}))
    return path


@pytest.fixture
def workspace(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "data"), "--n", "30", "--seed", "1"]) == 0
    write_config(tmp_path / "cfg.json")
    return tmp_path


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestSynth:
    def test_layout(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "a"), "--n", "10"]) == 0
        root = tmp_path / "a"
        assert (root / "manifest.json").is_file() and (root / "labels.csv").is_file()
        assert len([p for p in (root / "samples").iterdir() if p.is_dir()]) == 10

    def test_byte_identical(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CUBEMIX_SEED", "5")
        main(["synth", "--out", str(tmp_path / "a"), "--n", "12"])
        main(["synth", "--out", str(tmp_path / "b"), "--n", "12"])
        main(["synth", "--out", str(tmp_path / "c"), "--n", "12", "--seed", "6"])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


class TestTrain:
    def test_outputs(self, workspace):
        out = workspace / "run"
        assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(out)]) == 0
        for name in ("run.json", "epochs.csv", "best.ckpt", "final.ckpt", "account.json"):
            assert (out / name).is_file(), name
        assert len(json.loads((out / "run.json").read_text())["epochs"]) == 3

    def test_seed_env_and_flag(self, workspace, monkeypatch):
        cfg = str(workspace / "cfg.json")
        monkeypatch.setenv("CUBEMIX_SEED", "3")
        main(["train", "--config", cfg, "--out", str(workspace / "a")])
        main(["train", "--config", cfg, "--out", str(workspace / "b"), "--seed", "3"])
        main(["train", "--config", cfg, "--out", str(workspace / "c"), "--seed", "4"])
        a, b, c = ((workspace / d / "epochs.csv").read_bytes() for d in "abc")
        assert a == b and a != c
        assert json.loads((workspace / "a" / "run.json").read_text())["seed"] == 3

    def test_missing_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", dataset="nowhere")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
        err = last_error(capsys)
        assert "nowhere" in err["path"] and "nowhere" in err["message"]

    @pytest.mark.parametrize(
        "body",
        [
            "not json",
            json.dumps({"model": {**SMALL_MODEL, "l_out": [8]}}),
            json.dumps({"model": SMALL_MODEL, "train": {"lr0": -1}}),
            json.dumps({"model": SMALL_MODEL, "extra": 1}),
        ],
    )
    def test_bad_config(self, tmp_path, capsys, body):
        (tmp_path / "cfg.json").write_text(body)
        assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]) == 2
        assert last_error(capsys)["error"] == "ConfigError"

    def test_bad_seed_env(self, workspace, monkeypatch, capsys):
        monkeypatch.setenv("CUBEMIX_SEED", "abc")
        assert main(["train", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "o")]) == 2

    def test_shape_mismatch_is_data_error(self, tmp_path, capsys):
        main(["synth", "--out", str(tmp_path / "data"), "--n", "10", "--shape", "6", "3", "4"])
        cfg = write_config(tmp_path / "cfg.json")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3

    def test_numeric_abort(self, workspace, capsys):
        cfg = write_config(workspace / "hot.json", optimizer="sgd", lr0=1e30, loss="mse")
        with np.errstate(all="ignore"):
            code = main(["train", "--config", str(cfg), "--out", str(workspace / "o")])
        assert code == 4
        assert "epoch" in last_error(capsys)


class TestEval:
    def test_eval(self, workspace):
        main(["train", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "run")])
        out = workspace / "ev"
        code = main(["eval", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data"), "--split", "val", "--out", str(out)])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        run = json.loads((workspace / "run" / "run.json").read_text())
        assert metrics == run["epochs"][run["best_epoch"]]["val"]
        assert (out / "metrics.csv").read_text().splitlines()[0] == "mae,corr,ccc,acc2,f1,acc7"

    def test_missing_checkpoint(self, workspace):
        assert main(["eval", "--checkpoint", str(workspace / "x.ckpt"), "--data", str(workspace / "data"),
                     "--out", str(workspace / "ev")]) == 3


class TestDrivers:
    def test_ablate(self, workspace, capsys):
        write_config(workspace / "cfg.json", epochs=1)
        assert main(["ablate", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "ab"),
                     "--jobs", "2"]) == 0
        rows = list(csv.reader(io.StringIO((workspace / "ab" / "ablation.csv").read_text())))
        assert len(rows) == 8 and rows[7][:4] == ["Model 7", "1", "1", "1"]
        assert "Model 7" in capsys.readouterr().out

    def test_sweep(self, workspace):
        write_config(workspace / "cfg.json", epochs=1)
        assert main(["sweep", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "sw"),
                     "--axis", "M", "--values", "1", "2", "3"]) == 0
        rows = (workspace / "sw" / "sweep_M.csv").read_text().splitlines()
        assert rows[0] == "value,mae,corr,acc2,f1,acc7" and len(rows) == 4

    def test_sweep_bad_value(self, workspace):
        assert main(["sweep", "--config", str(workspace / "cfg.json"), "--out", str(workspace / "sw"),
                     "--axis", "D", "--values", "0"]) == 2


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--trials", "6", "--seed", "2"]) == 0
        out = capsys.readouterr().out
        for kind in LAYER_TYPES:
            assert sum(line.startswith(kind + " ") for line in out.splitlines()) == 1, kind

    def test_perturbed_fails(self, capsys):
        assert main(["gradcheck", "--trials", "3", "--perturb-hook"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_zero_trials(self):
        assert main(["gradcheck", "--trials", "0"]) == 2


class TestExportFeatures:
    @pytest.fixture
    def reference_setup(self, tmp_path):
        cfg = reference_config()
        ds = synth_dataset(0, 10, (100, 3, 128))
        write_dataset(tmp_path / "data", ds)
        zeros = {m: np.zeros((100, 128), np.float32) for m in ds.modalities}
        write_sample(tmp_path / "data", RawSample("zero", zeros, 0.0))
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
        manifest["splits"]["test"].append("zero")
        (tmp_path / "data" / "manifest.json").write_text(json.dumps(manifest))
        with open(tmp_path / "data" / "labels.csv", "a") as fh:
            fh.write("zero,0.0\n")
        save_checkpoint(tmp_path / "m.ckpt", cfg, init_params(cfg, 0, np.float32))
        return tmp_path

    def test_nine_images(self, reference_setup):
        out = reference_setup / "feat"
        sample = synth_dataset(0, 10, (100, 3, 128)).train.ids[0]
        assert main(["export-features", "--checkpoint", str(reference_setup / "m.ckpt"),
                     "--data", str(reference_setup / "data"), "--sample", sample, "--out", str(out)]) == 0
        assert len(list(out.glob("*.pgm"))) == 9 and len(list(out.glob("*.csv"))) == 9
        assert read_pgm(out / "block1_mod1.pgm").shape == (100, 128)
        assert read_pgm(out / "block2_mod3.pgm").shape == (10, 32)
        assert np.loadtxt(out / "block3_mod2.csv", delimiter=",").shape == (10, 3)
        img = read_pgm(out / "block1_mod1.pgm")
        assert img.min() == 0 and img.max() == 255

    def test_zero_sample(self, reference_setup):
        out = reference_setup / "feat0"
        assert main(["export-features", "--checkpoint", str(reference_setup / "m.ckpt"),
                     "--data", str(reference_setup / "data"), "--sample", "zero", "--out", str(out)]) == 0
        for path in out.glob("*.pgm"):
            assert not np.any(read_pgm(path)), path.name

    def test_unknown_sample(self, reference_setup, capsys):
        code = main(["export-features", "--checkpoint", str(reference_setup / "m.ckpt"),
                     "--data", str(reference_setup / "data"), "--sample", "ghost", "--out", str(reference_setup / "f")])
        assert code == 3 and last_error(capsys)["sample_id"] == "ghost"


def test_pgm_round_trip(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0.0, 1.0], [0.5, 2.0]]))
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 128], [64, 255]])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cubemix", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "0.1.0"
