"""Predictive moments and negative log predictive density (NLPD)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import HeterogeneousDataset
from .inference import LmcModel, _factorise, output_marginals
from .quadrature import GhRule, gh_rule

LOG_DENSITY_FLOOR = -50.0


@dataclass
class OutputPrediction:
    X: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    log_density: np.ndarray | None = None


@dataclass
class PredictionSet:
    outputs: list[OutputPrediction]

    def __getitem__(self, d) -> OutputPrediction:
        return self.outputs[d]

    def __len__(self):
        return len(self.outputs)


def predict(model: LmcModel, X_star, rule: GhRule | None = None, Y_star=None) -> PredictionSet:
    """Predictive mean/variance of every output at ``X_star[d]``.

    If test targets ``Y_star`` are given the per-point log predictive
    density (floored at -50) is attached as well.
    """
    rule = rule or gh_rule()
    if len(X_star) != len(model.likelihoods):
        raise ValueError(f"need test inputs for {len(model.likelihoods)} outputs, got {len(X_star)}")
    fac = _factorise(model)
    outs = []
    for d, lik in enumerate(model.likelihoods):
        X = np.asarray(X_star[d], dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] == 0:
            empty = np.zeros(0)
            outs.append(OutputPrediction(X, empty, empty, empty if Y_star is not None else None))
            continue
        m, v = output_marginals(model, d, X, fac)
        mean, var = lik.predictive_moments(m, v, rule)
        lpd = None
        if Y_star is not None:
            lpd = np.maximum(lik.log_predictive_density(Y_star[d], m, v, rule), LOG_DENSITY_FLOOR)
        outs.append(OutputPrediction(X, np.asarray(mean), np.maximum(np.asarray(var), 0.0), lpd))
    return PredictionSet(outs)


def nlpd(model: LmcModel, test: HeterogeneousDataset, rule: GhRule | None = None):
    """Per-output mean NLPD and the pooled mean over all test points.

    Outputs without test points get ``nan`` in ``per_output`` and do not
    contribute to the pooled value.
    """
    if sum(test.sizes) == 0:
        raise ValueError("empty test set")
    preds = predict(model, test.X, rule, Y_star=test.Y)
    per_output = np.array([-np.mean(p.log_density) if p.log_density.size else np.nan for p in preds])
    pooled = -np.concatenate([p.log_density for p in preds]).mean()
    return float(pooled), per_output


def nlpd_sum(model: LmcModel, test: HeterogeneousDataset, rule: GhRule | None = None) -> float:
    """Unnormalised total ``-sum log p(y*)`` over all test points."""
    preds = predict(model, test.X, rule, Y_star=test.Y)
    return float(-np.sum(np.concatenate([p.log_density for p in preds])))
