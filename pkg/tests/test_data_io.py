import json

import numpy as np
import pytest

from hetmogp.data_io import (
    DataFormatError, GapConfig, gap_experiment, load, load_model, model_from_dict, model_to_dict,
    read_manifest, save, save_model, write_truth,
)
from hetmogp.dataset import HeterogeneousDataset
from hetmogp.inference import elbo
from hetmogp.likelihoods import Bernoulli, HetGaussian, Poisson

from _helpers import random_data, random_model

LIKS = [Bernoulli(), Poisson(), HetGaussian()]


def write_manifest(tmp_path, outputs, p=1):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"input_dim": p, "outputs": outputs}))
    return path


class TestDatasets:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        data = random_data(LIKS, rng, [7, 0, 5], p=2)
        data.X[2][0, 0] = 0.1 + 0.2  # not exactly representable in few digits
        save(data, tmp_path / "d.json")
        manifest, back = load(tmp_path / "d.json")
        assert manifest.input_dim == 2
        assert [o.likelihood for o in manifest.outputs] == ["bernoulli", "poisson", "het_gaussian"]
        for d in range(3):
            np.testing.assert_array_equal(back.X[d], data.X[d])
            np.testing.assert_array_equal(back.Y[d], data.Y[d])
            assert back.Y[d].dtype == data.Y[d].dtype

    def test_header_only_file(self, tmp_path):
        (tmp_path / "a.csv").write_text("x1,y\n")
        path = write_manifest(tmp_path, [{"name": "a", "likelihood": "poisson", "data_path": "a.csv"}])
        _, data = load(path)
        assert data.sizes == [0]

    def test_bad_bernoulli_value_names_line(self, tmp_path):
        (tmp_path / "b.csv").write_text("x1,y\n0.1,1\n0.2,0\n0.3,2\n")
        path = write_manifest(tmp_path, [{"name": "b", "likelihood": "Bernoulli", "data_path": "b.csv"}])
        with pytest.raises(DataFormatError, match=r"b\.csv, line 4, column 2"):
            load(path)

    def test_unparsable_cell(self, tmp_path):
        (tmp_path / "r.csv").write_text("x1,x2,y\n0.1,abc,1.0\n")
        path = write_manifest(tmp_path, [{"name": "r", "likelihood": "het_gaussian", "data_path": "r.csv"}], p=2)
        with pytest.raises(DataFormatError, match="line 2, column 2"):
            load(path)

    def test_wrong_header(self, tmp_path):
        (tmp_path / "r.csv").write_text("x,y\n0.1,1.0\n")
        path = write_manifest(tmp_path, [{"name": "r", "likelihood": "het_gaussian", "data_path": "r.csv"}])
        with pytest.raises(DataFormatError, match="header"):
            load(path)

    def test_unknown_likelihood(self, tmp_path):
        path = write_manifest(tmp_path, [{"name": "r", "likelihood": "gamma", "data_path": "r.csv"}])
        with pytest.raises(DataFormatError, match="gamma"):
            read_manifest(path)

    def test_missing_fields(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"outputs": []}))
        with pytest.raises(DataFormatError, match="input_dim"):
            read_manifest(path)
        path = write_manifest(tmp_path, [{"name": "r", "likelihood": "poisson"}])
        with pytest.raises(DataFormatError, match="data_path"):
            read_manifest(path)

    def test_missing_file(self, tmp_path):
        path = write_manifest(tmp_path, [{"name": "r", "likelihood": "poisson", "data_path": "nope.csv"}])
        with pytest.raises(DataFormatError, match="does not exist"):
            load(path)

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            HeterogeneousDataset([Bernoulli()], [np.zeros((2, 1))], [np.array([0, 3])])
        with pytest.raises(ValueError):
            HeterogeneousDataset([Bernoulli(), Poisson()], [np.zeros((1, 1)), np.zeros((1, 2))],
                                 [np.array([0]), np.array([1])])


class TestModels:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        model = random_model(LIKS, rng, Q=2, M=4, p=2)
        data = random_data(LIKS, rng, [5, 5, 5], p=2)
        save_model(model, tmp_path / "model.json")
        back = load_model(tmp_path / "model.json")
        np.testing.assert_array_equal(back.get_params(), model.get_params())
        assert [l.name for l in back.likelihoods] == [l.name for l in model.likelihoods]
        a, b = elbo(model, data).total, elbo(back, data).total
        assert abs(a - b) <= 1e-12 * abs(a)

    def test_inconsistent_J(self):
        raw = model_to_dict(random_model(LIKS, np.random.default_rng(2)))
        raw["likelihoods"] = ["bernoulli", "poisson"]
        with pytest.raises(DataFormatError, match="J="):
            model_from_dict(raw)

    def test_shape_mismatch(self):
        raw = model_to_dict(random_model(LIKS, np.random.default_rng(3)))
        raw["mu"] = raw["mu"][:1]
        with pytest.raises(DataFormatError, match="'mu'"):
            model_from_dict(raw)

    @pytest.mark.parametrize("field", ["A", "kernels", "version", "L_raw"])
    def test_missing_field(self, field):
        raw = model_to_dict(random_model(LIKS, np.random.default_rng(4)))
        del raw[field]
        with pytest.raises(DataFormatError, match=f"'{field}'"):
            model_from_dict(raw)

    def test_version_mismatch(self):
        raw = model_to_dict(random_model(LIKS, np.random.default_rng(5)))
        raw["version"] = 99
        with pytest.raises(DataFormatError, match="version"):
            model_from_dict(raw)

    def test_truncated_file(self, tmp_path):
        save_model(random_model(LIKS, np.random.default_rng(6)), tmp_path / "m.json")
        text = (tmp_path / "m.json").read_text()
        (tmp_path / "m.json").write_text(text[: len(text) // 2])
        with pytest.raises(DataFormatError, match="truncated"):
            load_model(tmp_path / "m.json")


class TestGapExperiment:
    def test_partition(self):
        train, test, truth = gap_experiment(GapConfig(), np.random.default_rng(0))
        assert train.sizes[0] == 600 and test.sizes[0] == 0
        assert train.sizes[1] + test.sizes[1] == 500
        lo, hi = GapConfig().gap
        assert not np.any((train.X[1] >= lo) & (train.X[1] <= hi))
        assert np.all((test.X[1] >= lo) & (test.X[1] <= hi))
        assert not set(train.X[1][:, 0]) & set(test.X[1][:, 0])
        assert test.sizes[1] >= 75
        assert [x.shape for x in truth.train] == [(600, 2), (train.sizes[1], 1)]
        assert [l.name for l in train.likelihoods] == ["het_gaussian", "bernoulli"]

    def test_deterministic(self):
        a = gap_experiment(GapConfig(), np.random.default_rng(3))
        b = gap_experiment(GapConfig(), np.random.default_rng(3))
        for d in range(2):
            np.testing.assert_array_equal(a[0].X[d], b[0].X[d])
            np.testing.assert_array_equal(a[0].Y[d], b[0].Y[d])
            np.testing.assert_array_equal(a[1].Y[d], b[1].Y[d])

    def test_too_few_gap_points(self):
        cfg = GapConfig(n2=20, gap=(0.7, 0.71), max_retries=3)
        with pytest.raises(RuntimeError, match="gap"):
            gap_experiment(cfg, np.random.default_rng(0))

    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            gap_experiment(GapConfig(gap=(0.5, 1.5)), np.random.default_rng(0))

    def test_truth_sidecar(self, tmp_path):
        cfg = GapConfig(n1=30, n2=40, n_test=4)
        train, test, truth = gap_experiment(cfg, np.random.default_rng(1))
        write_truth(truth, train, test, tmp_path)
        lines = (tmp_path / "truth_train_real.csv").read_text().splitlines()
        assert lines[0] == "x1,f1,f2" and len(lines) == 31
