import json

import numpy as np
import pytest

from hetmogp.cli import main

SMALL = ["--n1", "40", "--n2", "60", "--n-test", "10"]
QUICK = ["--q", "2", "--m", "5", "--em-cycles", "1", "--max-iters", "10"]


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--out", str(out), "--seed", "1", *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def fitted(generated, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", "--manifest", str(generated / "train.json"), "--out", str(out), *QUICK]) == 0
    return out


def files_of(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestGenerate:
    def test_reproducible(self, generated, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--seed", "1", *SMALL]) == 0
        assert files_of(tmp_path) == files_of(generated)

    def test_run_record_echoes_flags(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--n1", "30", "--n2", "50",
                     "--gap", "0.2:0.5", "--n-test", "5"]) == 0
        cfg = json.loads((tmp_path / "run.json").read_text())["config"]
        assert (cfg["n1"], cfg["n2"], cfg["gap"], cfg["n_test"]) == (30, 50, [0.2, 0.5], 5)

    def test_missing_out_is_usage_error(self, capsys):
        assert main(["generate"]) == 2
        assert "--out" in capsys.readouterr().err

    @pytest.mark.parametrize("gap", ["0.5", "0.6:0.3", "a:b", "-0.1:0.3"])
    def test_bad_gap(self, gap, tmp_path):
        assert main(["generate", "--out", str(tmp_path), "--gap", gap]) == 2

    def test_config_precedence(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"n1": 25, "n2": 45, "n_test": 5}))
        out = tmp_path / "o"
        assert main(["generate", "--out", str(out), "--config", str(conf), "--n2", "55"]) == 0
        cfg = json.loads((out / "run.json").read_text())["config"]
        assert (cfg["n1"], cfg["n2"]) == (25, 55)

    def test_config_unknown_key(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"bogus": 1}))
        assert main(["generate", "--out", str(tmp_path), "--config", str(conf)]) == 2


class TestFit:
    def test_outputs(self, fitted):
        record = json.loads((fitted / "fit.json").read_text())
        assert record["model_files"] == ["model.json"]
        assert record["elbo_final"] > record["elbo_initial"]
        assert (fitted / "trace.jsonl").exists() and (fitted / "timing.json").exists()
        assert "wall" not in json.dumps(record)

    def test_independent(self, generated, tmp_path):
        assert main(["fit", "--manifest", str(generated / "train.json"), "--out", str(tmp_path),
                     "--independent", *QUICK]) == 0
        record = json.loads((tmp_path / "fit.json").read_text())
        assert len(record["model_files"]) == 2
        assert all((tmp_path / f).exists() for f in record["model_files"])

    def test_unknown_likelihood(self, tmp_path, capsys):
        (tmp_path / "a.csv").write_text("x1,y\n0.1,1.0\n")
        (tmp_path / "m.json").write_text(json.dumps(
            {"input_dim": 1, "outputs": [{"name": "a", "likelihood": "gamma", "data_path": "a.csv"}]}))
        assert main(["fit", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "o")]) == 1
        assert "gamma" in capsys.readouterr().err

    def test_quad_order_cap(self, generated, tmp_path):
        assert main(["fit", "--manifest", str(generated / "train.json"), "--out", str(tmp_path),
                     "--quad-order", "500"]) == 2


class TestPredictEvaluate:
    def test_grid(self, fitted, tmp_path):
        assert main(["predict", "--model", str(fitted), "--grid", "0:1:200", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "pred_output2.csv").read_text().splitlines()
        assert lines[0] == "x1,mean,variance" and len(lines) == 201
        mean = np.array([float(l.split(",")[1]) for l in lines[1:]])
        assert np.all((mean >= 0) & (mean <= 1))

    def test_manifest_adds_log_density(self, fitted, generated, tmp_path):
        assert main(["predict", "--model", str(fitted / "model.json"),
                     "--manifest", str(generated / "test.json"), "--out", str(tmp_path)]) == 0
        header = (tmp_path / "pred_binary.csv").read_text().splitlines()[0]
        assert header.endswith("log_density")

    def test_evaluate_rows(self, fitted, generated, tmp_path, capsys):
        assert main(["evaluate", "--model", str(fitted), "--manifest", str(generated / "test.json"),
                     "--per-output", "--out", str(tmp_path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "Test-NLPD (x10^-2)"
        assert [l.split()[0] for l in lines[1:]] == ["real", "binary", "Global"]
        assert lines[1].split()[1] == "nan"  # no test points for the real output
        result = json.loads((tmp_path / "result.json").read_text())
        assert result["nlpd_per_output"][0] is None
        assert result["nlpd_global"] == result["nlpd_per_output"][1]
        assert abs(100 * result["nlpd_global"] - float(lines[3].split()[1])) < 1e-4

    def test_evaluate_on_training_set(self, fitted, generated, capsys):
        assert main(["evaluate", "--model", str(fitted), "--manifest", str(generated / "train.json"),
                     "--per-output"]) == 0
        values = [float(l.split()[1]) for l in capsys.readouterr().out.splitlines()[1:]]
        assert len(values) == 3 and np.all(np.isfinite(values))

    def test_mismatched_model(self, generated, tmp_path):
        (tmp_path / "a.csv").write_text("x1,y\n0.1,1\n")
        (tmp_path / "m.json").write_text(json.dumps(
            {"input_dim": 1, "outputs": [{"name": "a", "likelihood": "poisson", "data_path": "a.csv"}]}))
        fit_dir = tmp_path / "fit"
        assert main(["fit", "--manifest", str(tmp_path / "m.json"), "--out", str(fit_dir),
                     "--q", "1", "--m", "1", "--em-cycles", "0"]) == 0
        assert main(["evaluate", "--model", str(fit_dir), "--manifest", str(generated / "test.json")]) == 1

    def test_missing_model_file(self, generated):
        assert main(["evaluate", "--model", "/nonexistent/model.json",
                     "--manifest", str(generated / "test.json")]) == 1
