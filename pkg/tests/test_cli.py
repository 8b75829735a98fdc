"""CLI surface: exit codes, determinism, file outputs."""

import csv
import hashlib
import json

import numpy as np
import pytest

from nunet.checkpoint import save_checkpoint
from nunet.cli import main
from nunet.encoder import ModelConfig
from nunet.model import NuNet


def tree_hash(root):
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert main(["synth", "--n", "12", "--seed", "3", "--out", str(root),
                 "--size", "32"]) == 0
    return root


@pytest.fixture(scope="module")
def micro_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.json"
    blob = {"model": ModelConfig.micro().to_dict(),
            "train": {"batch_size": 4, "epochs": 2, "learning_rate": 1e-3,
                      "seed": 1}}
    path.write_text(json.dumps(blob))
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "model.bin"
    model = NuNet(ModelConfig.micro(), seed=5)
    rng = np.random.default_rng(0)
    for _, t in model.named_parameters():
        t.data += rng.normal(scale=0.05, size=t.shape)
    save_checkpoint(path, model)
    return path


class TestSynth:
    def test_deterministic_directories(self, tmp_path, capsys):
        for sub in ("a", "b"):
            assert main(["synth", "--n", "5", "--seed", "7",
                         "--out", str(tmp_path / sub), "--size", "32"]) == 0
        capsys.readouterr()
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_n_zero_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--n", "0", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2

    def test_summary_matches_metadata(self, dataset, tmp_path, capsys):
        assert main(["synth", "--n", "12", "--seed", "3",
                     "--out", str(tmp_path / "again"), "--size", "32"]) == 0
        out = capsys.readouterr().out
        masses = []
        with open(tmp_path / "again" / "metadata.csv") as fh:
            for row in csv.DictReader(fh):
                masses.append(float(row["mass"]))
        line = next(l for l in out.splitlines() if l.strip().startswith("mass:"))
        assert f"min {min(masses):.4f}" in line
        assert f"max {max(masses):.4f}" in line

    def test_missing_subcommand_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


class TestTrainEval:
    def test_train_writes_outputs(self, dataset, micro_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(micro_config), "--data", str(dataset),
                     "--out", str(out), "--max-steps", "2"]) == 0
        capsys.readouterr()
        assert (out / "train_log.csv").exists()
        assert (out / "checkpoint.bin").exists()
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["command"] == "train"
        assert resolved["model"]["embed_dims"] == [1, 2, 4, 8]

    def test_eval_runs_on_checkpoint(self, dataset, checkpoint, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset),
                     "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "mape" in text and "calorie" in text
        rows = list(csv.DictReader(open(out / "eval.csv")))
        assert [r["nutrient"] for r in rows] == [
            "calorie", "mass", "fat", "carb", "protein", "mean"]

    def test_eval_oracle_predictions_zero_mape(self, dataset, capsys):
        assert main(["eval", "--oracle-predictions", "--data", str(dataset)]) == 0
        out = capsys.readouterr().out
        mean_row = next(l for l in out.splitlines() if l.strip().startswith("mean"))
        assert "0.0000" in mean_row

    def test_eval_config_mismatch_exit_2(self, dataset, tmp_path, micro_config):
        bogus = tmp_path / "bogus.bin"
        bogus.write_bytes(b"NOTNUN" + b"\0" * 32)
        assert main(["eval", "--checkpoint", str(bogus), "--data", str(dataset)]) == 1

    def test_eval_missing_checkpoint_flag(self, dataset):
        assert main(["eval", "--data", str(dataset)]) == 2

    def test_zero_depth_flag(self, dataset, checkpoint, capsys):
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset),
                     "--zero-depth"]) == 0
        capsys.readouterr()


class TestContrib:
    def test_columns_sum_to_100(self, dataset, checkpoint, tmp_path, capsys):
        out = tmp_path / "contrib"
        assert main(["contrib", "--checkpoint", str(checkpoint),
                     "--data", str(dataset), "--out", str(out)]) == 0
        capsys.readouterr()
        rows = list(csv.DictReader(open(out / "contrib.csv")))
        assert [r["scale"] for r in rows] == ["5", "6", "7", "8", "9"]
        for nutrient in ("calorie", "mass", "fat", "carb", "protein"):
            total = sum(float(r[nutrient]) for r in rows)
            assert abs(total - 100.0) < 1e-6


class TestAblate:
    def test_two_variant_run(self, dataset, micro_config, tmp_path, capsys):
        out = tmp_path / "ablate"
        assert main(["ablate", "--variants", "fe-plain-concat,single-scale",
                     "--data", str(dataset), "--out", str(out),
                     "--config", str(micro_config), "--steps", "1"]) == 0
        capsys.readouterr()
        rows = list(csv.DictReader(open(out / "ablate.csv")))
        assert [r["variant"] for r in rows] == ["fe-plain-concat", "single-scale"]
        assert all(float(r["mape_mean"]) > 0 for r in rows)
        assert int(rows[0]["param_count"]) > 0


class TestGradcheckCommand:
    def test_exit_zero_and_table(self, capsys):
        assert main(["gradcheck", "--max-per-param", "2"]) == 0
        out = capsys.readouterr().out
        assert "full_model" in out
        assert "worst relative error" in out
