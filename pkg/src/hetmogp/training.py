"""Variational EM: alternate updates of q(u) and of the hyperparameters.

The full-batch path runs L-BFGS-B on each block in turn. The stochastic
path draws one mini-batch per iteration, takes an ADADELTA step on the
variational block, then one on the hyperparameter block, and keeps the
best full-batch checkpoint.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import minimize

from ._linalg import CholeskyError, tri_solve
from .dataset import HeterogeneousDataset
from .inference import (HYPER_BLOCKS, VARIATIONAL_BLOCKS, ElboReport, LmcModel, _factorise,
                        elbo, elbo_grad)
from .quadrature import gh_rule

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    em_cycles: int = 5
    e_steps: int = 100
    m_steps: int = 100
    optimizer: str = "full_batch"
    batch_size: int = 500
    max_iters: int = 1000
    decay: float = 0.9
    epsilon: float = 1e-6
    step_rate: float = 1.0
    quad_order: int = 20
    jitter: float = 1e-8
    seed: int = 0
    optimize_z: bool = True
    tol: float = 1e-6
    checkpoint_every: int = 50
    trace_path: str | None = None

    def __post_init__(self):
        if self.optimizer not in ("full_batch", "stochastic"):
            raise ValueError(f"optimizer must be 'full_batch' or 'stochastic', got {self.optimizer!r}")
        for name in ("em_cycles", "e_steps", "m_steps", "max_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be positive")
        if not 0 < self.decay < 1 or self.epsilon <= 0 or self.step_rate <= 0:
            raise ValueError("invalid ADADELTA constants")

    def to_dict(self) -> dict:
        return asdict(self)


class Adadelta:
    """ADADELTA ascent steps with running averages of squared gradients and updates."""

    def __init__(self, size: int, decay: float = 0.9, epsilon: float = 1e-6, step_rate: float = 1.0):
        self.decay, self.epsilon, self.step_rate = decay, epsilon, step_rate
        self.gms = np.zeros(size)
        self.sms = np.zeros(size)

    def step(self, grad: np.ndarray) -> np.ndarray:
        rho, eps = self.decay, self.epsilon
        self.gms = rho * self.gms + (1 - rho) * grad ** 2
        delta = np.sqrt(self.sms + eps) / np.sqrt(self.gms + eps) * grad
        self.sms = rho * self.sms + (1 - rho) * delta ** 2
        return self.step_rate * delta


class _Trace:
    def __init__(self, path):
        self.reports: list[ElboReport] = []
        self._fh = open(path, "w") if path else None
        self._t0 = time.perf_counter()

    def add(self, iteration: int, report: ElboReport):
        self.reports.append(report)
        if self._fh:
            rec = {"iteration": iteration, **report.as_record(),
                   "wall_ms": round(1000 * (time.perf_counter() - self._t0), 3)}
            self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()


def _nonfinite_blocks(model: LmcModel, theta=None) -> list[str]:
    theta = model.get_params() if theta is None else theta
    return [name for name, sl in model.param_slices().items() if not np.all(np.isfinite(theta[sl]))]


def _free_mask(model: LmcModel, blocks, cfg: TrainConfig):
    blocks = [b for b in blocks if cfg.optimize_z or b != "Z"]
    return model.block_mask(blocks)


class _PriorWhitening:
    """Linear change of variables ``mu = L_K v``, ``L = L_K L_v`` for the
    variational block, with ``L_K`` the Cholesky factor of ``K_uu`` at the
    current hyperparameters.

    Only the optimiser sees ``(v, L_v)``; the model keeps ``(mu, L)``. With
    the hyperparameters fixed this is a preconditioner that removes the
    ``K_uu^{-1}`` curvature of the KL term.
    """

    def __init__(self, model: LmcModel):
        self.model = model
        self.theta0 = model.get_params()
        self.sl = model.param_slices()
        self.Lk = np.array(_factorise(model).chol)
        self.Q, self.M = model.Q, model.M
        self.tril = np.tril_indices(self.M)
        self.diag = np.arange(self.M)

    def encode(self, model: LmcModel) -> np.ndarray:
        ind = model.inducing
        v = np.array([tri_solve(self.Lk[q], ind.mu[q]) for q in range(self.Q)])
        Lv = np.array([tri_solve(self.Lk[q], ind.L[q]) for q in range(self.Q)])
        Lv[:, self.diag, self.diag] = np.log(Lv[:, self.diag, self.diag])
        return np.concatenate([v.ravel(), Lv[:, self.tril[0], self.tril[1]].ravel()])

    def _unpack(self, y):
        Q, M, d = self.Q, self.M, self.diag
        v = y[:Q * M].reshape(Q, M)
        Lv = np.zeros((Q, M, M))
        Lv[:, self.tril[0], self.tril[1]] = y[Q * M:].reshape(Q, -1)
        Lv[:, d, d] = np.exp(Lv[:, d, d])
        return v, Lv

    def decode(self, y) -> np.ndarray:
        v, Lv = self._unpack(y)
        d = self.diag
        mu = np.einsum("qij,qj->qi", self.Lk, v)
        L = self.Lk @ Lv
        L[:, d, d] = np.log(L[:, d, d])
        theta = self.theta0.copy()
        theta[self.sl["mu"]] = mu.ravel()
        theta[self.sl["L"]] = L[:, self.tril[0], self.tril[1]].ravel()
        return theta

    def pullback(self, y, grad) -> np.ndarray:
        """Gradient w.r.t. ``y`` from the gradient w.r.t. the model parameters."""
        Q, M, d = self.Q, self.M, self.diag
        _, Lv = self._unpack(y)
        L = self.Lk @ Lv
        dmu = grad[self.sl["mu"]].reshape(Q, M)
        dL = np.zeros((Q, M, M))
        dL[:, self.tril[0], self.tril[1]] = grad[self.sl["L"]].reshape(Q, -1)
        dL[:, d, d] /= L[:, d, d]
        dv = np.einsum("qji,qj->qi", self.Lk, dmu)
        dLv = np.tril(np.swapaxes(self.Lk, 1, 2) @ dL)
        dLv[:, d, d] *= Lv[:, d, d]
        return np.concatenate([dv.ravel(), dLv[:, self.tril[0], self.tril[1]].ravel()])


class _ScaledBlock:
    """Identity map on a parameter block, rescaled by ``scale``."""

    def __init__(self, model: LmcModel, mask, scale: float):
        self.theta0 = model.get_params()
        self.mask = mask
        self.scale = scale

    def encode(self, model: LmcModel) -> np.ndarray:
        return model.get_params()[self.mask] / self.scale

    def decode(self, y) -> np.ndarray:
        theta = self.theta0.copy()
        theta[self.mask] = y * self.scale
        return theta

    def pullback(self, y, grad) -> np.ndarray:
        return grad[self.mask] * self.scale


def _lbfgs_block(model, data, coords, maxiter, rule, trace, counter):
    cache = {}

    def objective(y):
        try:
            rep, g = elbo_grad(model.with_params(coords.decode(y)), data, rule=rule)
        except (CholeskyError, ValueError):
            return np.inf, np.zeros_like(y)
        if not np.isfinite(rep.total) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(y)
        cache[y.tobytes()] = rep
        return -rep.total, -coords.pullback(y, g)

    def callback(intermediate_result):
        y = intermediate_result.x
        rep = cache.get(y.tobytes())
        if rep is None:
            rep = elbo(model.with_params(coords.decode(y)), data, rule=rule)
        counter[0] += 1
        trace.add(counter[0], rep)

    y0 = coords.encode(model)
    f0, _ = objective(y0)
    res = minimize(objective, y0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": maxiter, "ftol": 1e-12, "gtol": 1e-8, "maxcor": 20})
    return res, f0


def _full_batch_step(model, data, blocks, cfg, maxiter, rule, trace, counter, label):
    mask = _free_mask(model, blocks, cfg)
    if not mask.any():
        return model
    try:
        start = elbo(model, data, rule=rule).total
    except CholeskyError as err:
        raise TrainingError(f"{label}: {err}") from err
    if not np.isfinite(start):
        raise TrainingError(f"non-finite ELBO at the start of the {label} step")
    whiten = set(blocks) == set(VARIATIONAL_BLOCKS)
    # L-BFGS-B's first trial step has unit length, which easily overflows
    # exp-parameterised quantities; retry with shorter first steps when no
    # step gets accepted.
    scale = 1.0 if whiten else 0.05
    for _ in range(4):
        if whiten:
            coords = _ScaledWrapper(_PriorWhitening(model), scale)
        else:
            coords = _ScaledBlock(model, mask, scale)
        res, f0 = _lbfgs_block(model, data, coords, maxiter, rule, trace, counter)
        if res.fun < f0 - 1e-12 * abs(f0):
            break
        scale *= 0.1
    logger.debug("%s: %d iterations, %s", label, res.nit, res.message)
    if not res.fun < f0:
        return model
    return model.with_params(coords.decode(res.x))


class _ScaledWrapper:
    def __init__(self, inner, scale):
        self.inner, self.scale = inner, scale

    def encode(self, model):
        return self.inner.encode(model) / self.scale

    def decode(self, y):
        return self.inner.decode(y * self.scale)

    def pullback(self, y, grad):
        return self.inner.pullback(y * self.scale, grad) * self.scale


def _fit_full_batch(model, data, cfg, rule, trace):
    counter = [0]
    prev = trace.reports[-1].total
    for cycle in range(cfg.em_cycles):
        if cfg.e_steps:
            model = _full_batch_step(model, data, VARIATIONAL_BLOCKS, cfg, cfg.e_steps, rule,
                                     trace, counter, f"E (cycle {cycle}, blocks mu/L)")
        if cfg.m_steps:
            model = _full_batch_step(model, data, HYPER_BLOCKS, cfg, cfg.m_steps, rule,
                                     trace, counter, f"M (cycle {cycle}, blocks kern/A/Z)")
        cur = trace.reports[-1].total
        logger.info("EM cycle %d: ELBO %.6f", cycle, cur)
        if abs(cur - prev) <= cfg.tol * max(abs(prev), 1.0):
            break
        prev = cur
    return model


def _fit_stochastic(model, data, cfg, rule, trace, rng):
    e_mask = _free_mask(model, VARIATIONAL_BLOCKS, cfg)
    m_mask = _free_mask(model, HYPER_BLOCKS, cfg)
    e_opt = Adadelta(int(e_mask.sum()), cfg.decay, cfg.epsilon, cfg.step_rate)
    m_opt = Adadelta(int(m_mask.sum()), cfg.decay, cfg.epsilon, cfg.step_rate)
    theta = model.get_params()
    best_theta, best = theta.copy(), trace.reports[-1].total
    sizes = data.sizes
    for it in range(1, cfg.max_iters + 1):
        batch = [np.sort(rng.choice(N, size=min(cfg.batch_size, N), replace=False)) if N else None
                 for N in sizes]
        for mask, opt, label in ((e_mask, e_opt, "E"), (m_mask, m_opt, "M")):
            if not mask.any():
                continue
            bad = _nonfinite_blocks(model, theta)
            if bad:
                raise TrainingError(f"{label} step at iteration {it}: non-finite parameters in "
                                    f"block(s) {', '.join(bad)}")
            try:
                rep, g = elbo_grad(model.with_params(theta), data, batch, rule)
            except CholeskyError as err:
                raise TrainingError(f"{label} step at iteration {it}: {err}") from err
            if not (np.isfinite(rep.total) and np.all(np.isfinite(g))):
                raise TrainingError(
                    f"non-finite ELBO in the {label} step at iteration {it} "
                    f"(blocks {'mu/L' if label == 'E' else 'kern/A/Z'})")
            theta = theta.copy()
            theta[mask] += opt.step(g[mask])
        if it % cfg.checkpoint_every == 0 or it == cfg.max_iters:
            try:
                rep = elbo(model.with_params(theta), data, rule=rule)
            except CholeskyError as err:
                raise TrainingError(f"checkpoint at iteration {it}: {err}") from err
            trace.add(it, rep)
            if rep.total > best:  # strict: earliest checkpoint wins ties
                best, best_theta = rep.total, theta.copy()
    return model.with_params(best_theta)


def fit(model: LmcModel, data: HeterogeneousDataset, config: TrainConfig | None = None,
        rng: np.random.Generator | None = None):
    """Train ``model`` on ``data`` by (stochastic) variational EM.

    Returns the trained model and the list of full-batch ELBO reports
    (the first entry is the initial model).
    """
    cfg = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    rule = gh_rule(cfg.quad_order)
    bad = _nonfinite_blocks(model)
    if bad:
        raise TrainingError(f"initial state has non-finite parameters in block(s) {', '.join(bad)}")
    trace = _Trace(cfg.trace_path)
    try:
        try:
            init = elbo(model, data, rule=rule)
        except CholeskyError as err:
            raise TrainingError(f"initial ELBO: {err}") from err
        if not np.isfinite(init.total):
            raise TrainingError("non-finite ELBO at the initial state")
        trace.add(0, init)
        if cfg.optimizer == "full_batch":
            if cfg.em_cycles == 0:
                return model, trace.reports
            trained = _fit_full_batch(model, data, cfg, rule, trace)
        else:
            if cfg.max_iters == 0:
                return model, trace.reports
            trained = _fit_stochastic(model, data, cfg, rule, trace, rng)
    finally:
        trace.close()
    return trained, trace.reports
