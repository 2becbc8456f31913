"""Dataset manifests, delimited-text data files, model files and the
synthetic missing-gap experiment.

A manifest is JSON::

    {"input_dim": 1,
     "outputs": [{"name": "real", "likelihood": "het_gaussian", "data_path": "real.csv"}]}

Data paths are resolved relative to the manifest. Each data file is
comma-separated with a header ``x1,...,xp,y``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import HeterogeneousDataset
from .inference import InducingState, LmcModel
from .kernels import RbfKernel
from .likelihoods import Bernoulli, HetGaussian, likelihood_from_name
from .prior import LmcCoefficients, sample_heterogeneous

MODEL_FORMAT = "hetmogp-model"
MODEL_VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class OutputSpec:
    name: str
    likelihood: str
    data_path: str


@dataclass
class DatasetManifest:
    input_dim: int
    outputs: list[OutputSpec]

    def likelihoods(self):
        return [likelihood_from_name(o.likelihood) for o in self.outputs]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise DataFormatError(f"{path}: invalid manifest JSON ({err})") from err
    for key in ("input_dim", "outputs"):
        if key not in raw:
            raise DataFormatError(f"{path}: manifest is missing field '{key}'")
    outputs = []
    for k, o in enumerate(raw["outputs"]):
        for key in ("name", "likelihood", "data_path"):
            if key not in o:
                raise DataFormatError(f"{path}: outputs[{k}] is missing field '{key}'")
        try:
            likelihood_from_name(str(o["likelihood"]))
        except ValueError as err:
            raise DataFormatError(f"{path}: outputs[{k}]: {err}") from None
        outputs.append(OutputSpec(str(o["name"]), str(o["likelihood"]), str(o["data_path"])))
    p = raw["input_dim"]
    if not isinstance(p, int) or p < 1:
        raise DataFormatError(f"{path}: input_dim must be a positive integer")
    return DatasetManifest(p, outputs)


def _read_data_file(path: Path, p: int, lik):
    X, Y = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: missing header row") from None
        expected = [f"x{i + 1}" for i in range(p)] + ["y"]
        if [h.strip() for h in header] != expected:
            raise DataFormatError(f"{path}: header {header} does not match {expected}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 1:
                raise DataFormatError(f"{path}, line {lineno}: expected {p + 1} columns, got {len(row)}")
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}, line {lineno}, column {col}: cannot parse {cell!r}") from None
            try:
                lik.check_y(np.array([vals[-1]]))
            except ValueError as err:
                raise DataFormatError(f"{path}, line {lineno}, column {p + 1}: {err}") from None
            if not np.all(np.isfinite(vals[:-1])):
                raise DataFormatError(f"{path}, line {lineno}: non-finite input")
            X.append(vals[:-1])
            Y.append(vals[-1])
    return np.array(X, dtype=float).reshape(-1, p), np.array(Y, dtype=float)


def load(manifest_path):
    """Read a manifest and all the data files it references."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    liks = manifest.likelihoods()
    X, Y = [], []
    for spec, lik in zip(manifest.outputs, liks):
        path = manifest_path.parent / spec.data_path
        if not path.exists():
            raise DataFormatError(f"data file {path} for output '{spec.name}' does not exist")
        x, y = _read_data_file(path, manifest.input_dim, lik)
        X.append(x)
        Y.append(y)
    data = HeterogeneousDataset(liks, X, Y, [o.name for o in manifest.outputs])
    return manifest, data


def write_data_file(path, X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    p = X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(p)] + ["y"])
        for row, target in zip(X, y):
            w.writerow([_fmt(v) for v in row] + [_fmt(target)])


def save(data: HeterogeneousDataset, manifest_path, prefix: str = "") -> DatasetManifest:
    """Write data files next to ``manifest_path`` and the manifest itself."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, lik, X, y in zip(data.names, data.likelihoods, data.X, data.Y):
        fname = f"{prefix}{name}.csv"
        write_data_file(manifest_path.parent / fname, X, y)
        outputs.append(OutputSpec(name, lik.name, fname))
    manifest = DatasetManifest(data.input_dim, outputs)
    manifest_path.write_text(json.dumps({
        "input_dim": manifest.input_dim,
        "outputs": [vars(o) for o in outputs],
    }, indent=2) + "\n")
    return manifest


# -- model files -------------------------------------------------------------

def model_to_dict(model: LmcModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "likelihoods": [lik.name for lik in model.likelihoods],
        "J": model.J,
        "Q": model.Q,
        "M": model.M,
        "input_dim": model.input_dim,
        "jitter": model.jitter,
        "A": model.coeffs.A.tolist(),
        "kernels": [{"variance": k.variance, "lengthscales": k.lengthscales.tolist(), "ard": k.ard}
                    for k in model.kernels],
        "Z": model.inducing.Z.tolist(),
        "mu": model.inducing.mu.tolist(),
        "L_raw": model.inducing.L_raw.tolist(),
    }


def _field(raw, name):
    if name not in raw:
        raise DataFormatError(f"model file is missing field '{name}'")
    return raw[name]


def model_from_dict(raw: dict) -> LmcModel:
    if _field(raw, "format") != MODEL_FORMAT:
        raise DataFormatError(f"not a model file (format {raw.get('format')!r})")
    if _field(raw, "version") != MODEL_VERSION:
        raise DataFormatError(f"unsupported model file version {raw['version']!r}, expected {MODEL_VERSION}")
    liks = [likelihood_from_name(n) for n in _field(raw, "likelihoods")]
    J, Q, M, p = (int(_field(raw, k)) for k in ("J", "Q", "M", "input_dim"))
    A = np.array(_field(raw, "A"), dtype=float)
    Z = np.array(_field(raw, "Z"), dtype=float)
    mu = np.array(_field(raw, "mu"), dtype=float)
    L_raw = np.array(_field(raw, "L_raw"), dtype=float)
    kernels_raw = _field(raw, "kernels")
    J_lik = sum(lik.latent_count for lik in liks)
    if J != J_lik:
        raise DataFormatError(f"model file declares J={J} but its likelihood list needs J={J_lik}")
    shapes = {"A": (A.shape, (J, Q)), "Z": (Z.shape, (M, p)), "mu": (mu.shape, (Q, M)),
              "L_raw": (L_raw.shape, (Q, M, M))}
    for name, (got, want) in shapes.items():
        if got != want:
            raise DataFormatError(f"model field '{name}' has shape {got}, expected {want}")
    if len(kernels_raw) != Q:
        raise DataFormatError(f"model file has {len(kernels_raw)} kernels, expected Q={Q}")
    kernels = [RbfKernel(_field(k, "variance"), np.array(_field(k, "lengthscales"), dtype=float),
                         ard=bool(_field(k, "ard"))) for k in kernels_raw]
    inducing = InducingState(Z, mu, L_raw)
    return LmcModel(tuple(liks), LmcCoefficients(A), tuple(kernels), inducing,
                    float(_field(raw, "jitter")))


def save_model(model: LmcModel, path):
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path) -> LmcModel:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise DataFormatError(f"{path}: truncated or malformed model file ({err})") from err
    return model_from_dict(raw)


# -- synthetic missing-gap experiment -----------------------------------------

# Generator used for the synthetic gap data. LPF order: real-output mean,
# real-output log-variance, binary-output logit. The binary logit and the
# real mean share the short-lengthscale process u_1.
GAP_COEFFICIENTS = ((2.0, 0.0, 0.0),
                    (0.0, 0.0, 0.4),
                    (2.5, 0.7, 0.0))
GAP_LENGTHSCALES = (0.08, 0.3, 0.5)


@dataclass
class GapConfig:
    n1: int = 600
    n2: int = 500
    gap: tuple = (0.7, 0.9)
    n_test: int = 150
    Q: int = 3
    coefficients: tuple = GAP_COEFFICIENTS
    lengthscales: tuple = GAP_LENGTHSCALES
    max_retries: int = 10

    def to_dict(self) -> dict:
        return {"n1": self.n1, "n2": self.n2, "gap": list(self.gap), "n_test": self.n_test,
                "Q": self.Q, "coefficients": [list(r) for r in self.coefficients],
                "lengthscales": list(self.lengthscales)}


@dataclass
class GroundTruth:
    """Latent values (N_d x J_d per output) behind the train and test splits."""

    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


def gap_experiment(config: GapConfig | None = None, rng: np.random.Generator | None = None):
    """Sample a real + binary dataset and hold out the binary points in the gap.

    Returns
    -------
    train, test : HeterogeneousDataset
        Outputs ``[real (het_gaussian), binary (bernoulli)]``. The test set
        holds every binary observation inside the gap and no real ones.
    truth : GroundTruth
    """
    cfg = config or GapConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    lo, hi = cfg.gap
    if not 0 <= lo < hi <= 1:
        raise ValueError(f"gap interval must lie inside [0, 1], got {cfg.gap}")
    A = np.array(cfg.coefficients, dtype=float)
    if A.shape != (3, cfg.Q) or len(cfg.lengthscales) != cfg.Q:
        raise ValueError("generator coefficients must be 3 x Q with Q lengthscales")
    coeffs = LmcCoefficients(A)
    kernels = [RbfKernel(1.0, np.array([ls])) for ls in cfg.lengthscales]
    liks = [HetGaussian(), Bernoulli()]
    for _ in range(cfg.max_retries):
        X1 = rng.random((cfg.n1, 1))
        X2 = rng.random((cfg.n2, 1))
        in_gap = (X2[:, 0] >= lo) & (X2[:, 0] <= hi)
        if in_gap.sum() >= cfg.n_test / 2:
            break
    else:
        raise RuntimeError(
            f"fewer than {cfg.n_test / 2:g} binary inputs fell in the gap after {cfg.max_retries} tries")
    data, latents = sample_heterogeneous(coeffs, kernels, liks, [X1, X2], rng)
    names = ["real", "binary"]
    train = HeterogeneousDataset(liks, [X1, X2[~in_gap]], [data.Y[0], data.Y[1][~in_gap]], names)
    test = HeterogeneousDataset(liks, [X1[:0], X2[in_gap]], [data.Y[0][:0], data.Y[1][in_gap]], names)
    truth = GroundTruth([latents[0], latents[1][~in_gap]], [latents[0][:0], latents[1][in_gap]])
    return train, test, truth


def write_truth(truth: GroundTruth, data_train, data_test, directory):
    """Sidecar CSVs ``truth_<split>_<output>.csv`` with inputs and latent values."""
    directory = Path(directory)
    for split, lat, data in (("train", truth.train, data_train), ("test", truth.test, data_test)):
        for name, F, X in zip(data.names, lat, data.X):
            with open(directory / f"truth_{split}_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([f"x{i + 1}" for i in range(X.shape[1])] +
                           [f"f{j + 1}" for j in range(F.shape[1])])
                for xr, fr in zip(X, F):
                    w.writerow([_fmt(v) for v in xr] + [_fmt(v) for v in fr])


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
