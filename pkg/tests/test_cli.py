import json
from pathlib import Path

import numpy as np
import pytest

from svfm.cli import comparison_matrix, main


def run(argv):
    return main([str(a) for a in argv])


def read_bytes(p):
    return Path(p).read_bytes()


@pytest.fixture
def split_file(tmp_path):
    out = tmp_path / "split.jsonl"
    assert run(["gen", "splitting", "--n", 80, "--seed", 3, "--out", out]) == 0
    return out


def quick_config(tmp_path, split_file, **overrides):
    doc = {
        "task": "endpoint",
        "dataset": {"path": str(split_file), "kind": "endpoints"},
        "model": {"variant": "vf", "hidden_layers": 1, "hidden_units": 32},
        "loss": {"terms": ["FL"]},
        "solver": {"kind": "rk4", "n_steps": 6},
        "optimizer": {"learning_rate": 0.01, "batch_size": 50, "epochs": 4},
        "seed": 3,
    }
    doc.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


class TestGen:
    def test_moons_line_count(self, tmp_path):
        out = tmp_path / "m.jsonl"
        assert run(["gen", "moons", "--n", 120, "--seed", 1, "--out", out]) == 0
        assert len(out.read_text().splitlines()) == 120

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run(["gen", "xor", "--n", 50, "--seed", 9, "--out", a])
        run(["gen", "xor", "--n", 50, "--seed", 9, "--out", b])
        assert read_bytes(a) == read_bytes(b)

    def test_home_night_landing_fraction(self, tmp_path):
        out = tmp_path / "h.jsonl"
        assert run(["gen", "home", "--n", 800, "--regime", "night", "--seed", 2, "--out", out]) == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        frac = sum(r["endpoint"] == "landing" for r in rows) / len(rows)
        assert abs(frac - 0.9) < 3 * np.sqrt(0.09 / 800)

    def test_refuses_overwrite_without_force(self, tmp_path):
        out = tmp_path / "m.jsonl"
        run(["gen", "moons", "--n", 10, "--seed", 1, "--out", out])
        assert run(["gen", "moons", "--n", 10, "--seed", 1, "--out", out]) == 2
        assert run(["gen", "moons", "--n", 10, "--seed", 1, "--out", out, "--force"]) == 0

    def test_unknown_dataset(self, tmp_path):
        assert run(["gen", "nope", "--out", tmp_path / "x.jsonl"]) == 2


class TestTrain:
    def test_train_writes_model_and_metrics(self, tmp_path, split_file):
        cfg = quick_config(tmp_path, split_file)
        assert run(["train", "--config", cfg, "--out", tmp_path / "run"]) == 0
        assert (tmp_path / "run" / "model.json").exists()
        assert (tmp_path / "run" / "metrics.jsonl").exists()

    def test_invalid_config_key_exit_2(self, tmp_path, split_file, capsys):
        cfg = quick_config(tmp_path, split_file, blatantly_wrong_key=1)
        assert run(["train", "--config", cfg, "--out", tmp_path / "run"]) == 2
        assert "blatantly_wrong_key" in capsys.readouterr().err

    def test_rerun_identical_outputs(self, tmp_path, split_file):
        cfg = quick_config(tmp_path, split_file)
        run(["train", "--config", cfg, "--out", tmp_path / "r1"])
        run(["train", "--config", cfg, "--out", tmp_path / "r2"])
        assert read_bytes(tmp_path / "r1" / "metrics.jsonl") == read_bytes(tmp_path / "r2" / "metrics.jsonl")
        assert read_bytes(tmp_path / "r1" / "model.json") == read_bytes(tmp_path / "r2" / "model.json")

    def test_divergence_exits_3(self, tmp_path, split_file):
        cfg = quick_config(tmp_path, split_file, optimizer={"learning_rate": 1e12, "batch_size": 50, "epochs": 30})
        assert run(["train", "--config", cfg, "--out", tmp_path / "run"]) == 3


class TestEvalForecast:
    @pytest.fixture
    def model_dir(self, tmp_path, split_file):
        cfg = quick_config(tmp_path, split_file)
        run(["train", "--config", cfg, "--out", tmp_path / "run"])
        return tmp_path / "run"

    def test_eval_reports_endpoint_error(self, tmp_path, split_file, model_dir, capsys):
        assert run(["eval", "--model", model_dir / "model.json", "--data", split_file, "--samples", 20]) == 0
        report = json.loads(capsys.readouterr().out.splitlines()[-1])
        assert "mean_endpoint_error" in report

    def test_forecast_deterministic(self, tmp_path, model_dir):
        a, b = tmp_path / "fa.jsonl", tmp_path / "fb.jsonl"
        for out in (a, b):
            assert run(["forecast", "--model", model_dir / "model.json", "--start", "0.0",
                        "--samples", 5, "--seed", 11, "--out", out]) == 0
        assert read_bytes(a) == read_bytes(b)

    def test_forecast_extrapolation_flagged(self, tmp_path, model_dir, capsys):
        out = tmp_path / "f.jsonl"
        assert run(["forecast", "--model", model_dir / "model.json", "--start", "0.0",
                    "--samples", 2, "--seed", 1, "--horizon", 2.5, "--out", out]) == 0
        assert "extrapolating" in capsys.readouterr().err
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert all(r["extrapolated"] for r in rows)

    def test_bad_start_dimension(self, tmp_path, model_dir):
        assert run(["forecast", "--model", model_dir / "model.json", "--start", "0.0,1.0",
                    "--samples", 1, "--seed", 1, "--out", tmp_path / "f.jsonl"]) == 2


class TestNfeReport:
    @pytest.fixture
    def model_dir(self, tmp_path, split_file):
        cfg = quick_config(tmp_path, split_file)
        run(["train", "--config", cfg, "--out", tmp_path / "run"])
        return tmp_path / "run"

    def test_self_comparison_diagonal(self, tmp_path, split_file, model_dir):
        out = tmp_path / "nfe"
        assert run(["nfe-report", "--models", model_dir / "model.json", model_dir / "model.json",
                    "--data", split_file, "--kind", "endpoints", "--seed", 5, "--out", out]) == 0
        comp = json.loads(next(out.glob("nfe_compare_*.json")).read_text())
        assert all(c["a"] == c["b"] for c in comp["cells"])
        assert comp["savings"] == 0
        assert sum(c["count"] for c in comp["cells"]) == comp["n"]

    def test_matrix_counts_and_savings(self):
        a = [10, 12, 10, 14]
        b = [8, 12, 9, 10]
        comp = comparison_matrix(a, b)
        assert sum(c["count"] for c in comp["cells"]) == 4
        assert comp["savings"] == sum(x - y for x, y in zip(a, b))
        assert comp["fraction_saved"] == 0.75
