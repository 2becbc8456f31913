"""Heterogeneous likelihoods modulated by latent parameter functions.

Every likelihood works on a batch of ``n`` observations. Latent values,
means and variances are arrays of shape ``(n, J)`` where ``J`` is the
number of latent parameter functions the likelihood consumes. A new
variant needs ``latent_count``, ``log_pdf``, ``sample``,
``predictive_moments`` and either a closed-form ``var_exp`` or the
first/second derivatives used by the quadrature fallback.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from .quadrature import GhRule, gh_rule

LOG_2PI = np.log(2.0 * np.pi)
# below this standard deviation the fixed-node variance derivative is
# replaced by its v -> 0 limit, 0.5 * E[h'']
_SD_FLOOR = 1e-7


class Likelihood:
    name: str = "likelihood"
    latent_count: int = 1
    value_kind: str = "real"

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))

    # -- data validation ---------------------------------------------------
    def check_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValueError(f"{self.name}: observations must be finite")
        return y

    # -- shape helpers -----------------------------------------------------
    def _prep(self, y, means, variances=None):
        J = self.latent_count
        scalar = np.ndim(y) == 0
        y = self.check_y(np.atleast_1d(y))
        means = np.asarray(means, dtype=float)
        if means.ndim <= 1:
            means = means.reshape(-1, J) if J > 1 or means.ndim == 0 else means[:, None]
        if not np.all(np.isfinite(means)):
            raise ValueError(f"{self.name}: latent means must be finite")
        if variances is None:
            variances = np.zeros_like(means)
        else:
            variances = np.asarray(variances, dtype=float).reshape(means.shape)
            if np.any(variances < 0) or not np.all(np.isfinite(variances)):
                raise ValueError(f"{self.name}: variances must be finite and non-negative")
        if means.shape[1] != J:
            raise ValueError(f"{self.name} expects {J} latent functions, got {means.shape[1]}")
        if means.shape[0] != y.shape[0]:
            raise ValueError("observation and latent batch sizes differ")
        return scalar, y, means, variances

    @staticmethod
    def _out(scalar, *arrays):
        if scalar:
            arrays = tuple(a[0] if np.ndim(a) else a for a in arrays)
        return arrays[0] if len(arrays) == 1 else arrays

    # -- pointwise pieces implemented by subclasses -------------------------
    def _log_pdf(self, y, F):
        """Log density, ``y`` shape (n,) and ``F`` shape (n, ..., J)."""
        raise NotImplementedError

    def _dlogp(self, y, f):
        raise NotImplementedError

    def _d2logp(self, y, f):
        raise NotImplementedError

    def links(self, F) -> np.ndarray:
        raise NotImplementedError

    def _sample(self, F, rng):
        raise NotImplementedError

    def _moments(self, means, variances, rule):
        raise NotImplementedError

    def log_pdf_sup(self, y) -> np.ndarray:
        """``sup_f log p(y | f)`` per observation (may be ``inf``)."""
        return np.full(np.shape(y), np.inf)

    # -- public operations ---------------------------------------------------
    def log_pdf(self, y, f):
        scalar, y, F, _ = self._prep(y, f)
        return self._out(scalar, self._log_pdf(y, F))

    def var_exp(self, y, means, variances, rule: GhRule | None = None):
        """``E_q[log p(y | f)]`` under independent Gaussian marginals."""
        return self.var_exp_quadrature(y, means, variances, rule)

    def var_exp_grad(self, y, means, variances, rule: GhRule | None = None):
        """Gradients of :meth:`var_exp` w.r.t. ``means`` and ``variances``."""
        return self._quad_grad(y, means, variances, rule)

    def var_exp_quadrature(self, y, means, variances, rule: GhRule | None = None):
        """Tensor-product Gauss-Hermite estimate of :meth:`var_exp`."""
        rule = rule or gh_rule()
        scalar, y, m, v = self._prep(y, means, variances)
        J = self.latent_count
        x = rule.nodes
        sd = np.sqrt(2.0 * v)
        n, K = m.shape[0], rule.order
        grids = np.meshgrid(*([np.arange(K)] * J), indexing="ij")
        idx = [g.ravel() for g in grids]
        F = np.stack([m[:, j, None] + sd[:, j, None] * x[idx[j]] for j in range(J)], -1)
        w = np.prod([rule.weights[i] for i in idx], axis=0)
        vals = self._log_pdf(y[:, None], F.reshape(n, K ** J, J))
        return self._out(scalar, vals @ w)

    def _quad_grad(self, y, means, variances, rule):
        if self.latent_count != 1:
            raise NotImplementedError(f"{self.name}: no quadrature gradient for J > 1")
        rule = rule or gh_rule()
        scalar, y, m, v = self._prep(y, means, variances)
        t = rule.std_nodes
        sd = np.sqrt(v[:, 0])
        f = m[:, :1] + sd[:, None] * t
        d1 = self._dlogp(y[:, None], f)
        gm = d1 @ rule.weights
        small = sd < _SD_FLOOR
        with np.errstate(divide="ignore", invalid="ignore"):
            gv = (d1 * t) @ rule.weights / (2.0 * sd)
        if np.any(small):
            gv[small] = 0.5 * self._d2logp(y[small], m[small, 0])
        return self._out(scalar, gm[:, None], gv[:, None])

    def predictive_moments(self, means, variances, rule: GhRule | None = None):
        """Mean and variance of ``y*`` under ``int p(y*|f) q(f) df``."""
        rule = rule or gh_rule()
        J = self.latent_count
        means = np.asarray(means, dtype=float)
        scalar = means.ndim == 0 or (means.ndim == 1 and J > 1)
        _, _, m, v = self._prep(np.zeros(means.reshape(-1, J).shape[0]), means, variances)
        mean, var = self._moments(m, v, rule)
        return self._out(scalar, mean, var)

    def log_predictive_density(self, y, means, variances, rule: GhRule | None = None):
        """``log int p(y|f) q(f) df`` by log-sum-exp over quadrature nodes."""
        rule = rule or gh_rule()
        scalar, y, m, v = self._prep(y, means, variances)
        J = self.latent_count
        K = rule.order
        x = rule.nodes
        sd = np.sqrt(2.0 * v)
        grids = np.meshgrid(*([np.arange(K)] * J), indexing="ij")
        idx = [g.ravel() for g in grids]
        F = np.stack([m[:, j, None] + sd[:, j, None] * x[idx[j]] for j in range(J)], -1)
        logw = np.sum([np.log(rule.weights[i]) for i in idx], axis=0)
        lp = self._log_pdf(y[:, None], F)
        return self._out(scalar, logsumexp(lp + logw, axis=1))

    def sample(self, f, rng: np.random.Generator):
        J = self.latent_count
        f = np.asarray(f, dtype=float)
        scalar = f.ndim == 0 or (f.ndim == 1 and J > 1)
        F = f.reshape(-1, J)
        if not np.all(np.isfinite(F)):
            raise ValueError(f"{self.name}: latent values must be finite")
        return self._out(scalar, self._sample(F, rng))


class Bernoulli(Likelihood):
    """Binary outputs with a logistic link."""

    name = "bernoulli"
    latent_count = 1
    value_kind = "binary"

    def check_y(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all((y == 0) | (y == 1)):
            bad = y[~((y == 0) | (y == 1))]
            raise ValueError(f"bernoulli: observations must be 0 or 1, got {bad[0]!r}")
        return y

    def links(self, F):
        return expit(F)

    def _log_pdf(self, y, F):
        s = 2.0 * y - 1.0
        return -np.logaddexp(0.0, -s * F[..., 0])

    def _dlogp(self, y, f):
        s = 2.0 * y - 1.0
        return s * expit(-s * f)

    def _d2logp(self, y, f):
        return -expit(f) * expit(-f)

    def log_pdf_sup(self, y):
        return np.zeros(np.shape(y))

    def _moments(self, m, v, rule):
        f = m[:, :1] + np.sqrt(2.0 * v[:, :1]) * rule.nodes
        p = expit(f) @ rule.weights
        return p, p * (1.0 - p)

    def _sample(self, F, rng):
        return (rng.random(F.shape[0]) < expit(F[:, 0])).astype(np.int64)


class Poisson(Likelihood):
    """Count outputs with an exponential link on the rate."""

    name = "poisson"
    latent_count = 1
    value_kind = "count"

    def check_y(self, y):
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(y) & (y >= 0) & (y == np.round(y))
        if not np.all(ok):
            raise ValueError(
                f"poisson: observations must be non-negative integers, got {y[~ok][0]!r}")
        return y

    def links(self, F):
        return np.exp(F)

    def _log_pdf(self, y, F):
        f = F[..., 0]
        return y * f - np.exp(f) - gammaln(y + 1.0)

    def _dlogp(self, y, f):
        return y - np.exp(f)

    def _d2logp(self, y, f):
        return -np.exp(f) + 0.0 * y

    def log_pdf_sup(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0)
        return ylogy - y - gammaln(y + 1.0)

    def var_exp(self, y, means, variances, rule=None):
        scalar, y, m, v = self._prep(y, means, variances)
        mu, var = m[:, 0], v[:, 0]
        return self._out(scalar, y * mu - np.exp(mu + 0.5 * var) - gammaln(y + 1.0))

    def var_exp_grad(self, y, means, variances, rule=None):
        scalar, y, m, v = self._prep(y, means, variances)
        rate = np.exp(m[:, 0] + 0.5 * v[:, 0])
        return self._out(scalar, (y - rate)[:, None], (-0.5 * rate)[:, None])

    def _moments(self, m, v, rule):
        mu, var = m[:, 0], v[:, 0]
        mean = np.exp(mu + 0.5 * var)
        return mean, mean + np.expm1(var) * np.exp(2.0 * mu + var)

    def _sample(self, F, rng):
        return rng.poisson(np.exp(F[:, 0])).astype(np.int64)


class HetGaussian(Likelihood):
    """Gaussian whose mean (identity link) and variance (exp link) both vary.

    The exponent of the precision factor ``exp(-mu_2 + v_2 / 2)`` is clamped
    to ``[-40, 40]``; ``clamp_events`` counts how often that happened.
    """

    name = "het_gaussian"
    latent_count = 2
    value_kind = "real"
    CLAMP = 40.0
    clamp_events = 0

    def links(self, F):
        F = np.asarray(F, dtype=float)
        return np.stack([F[..., 0], np.exp(F[..., 1])], -1)

    def _log_pdf(self, y, F):
        f1, f2 = F[..., 0], F[..., 1]
        return -0.5 * LOG_2PI - 0.5 * f2 - 0.5 * np.exp(-f2) * (y - f1) ** 2

    def _precision_factor(self, m2, v2):
        expo = -m2 + 0.5 * v2
        clipped = np.clip(expo, -self.CLAMP, self.CLAMP)
        hits = int(np.count_nonzero(clipped != expo))
        if hits:
            HetGaussian.clamp_events += hits
        return np.exp(clipped), clipped == expo

    def var_exp(self, y, means, variances, rule=None):
        scalar, y, m, v = self._prep(y, means, variances)
        e, _ = self._precision_factor(m[:, 1], v[:, 1])
        r2 = (y - m[:, 0]) ** 2 + v[:, 0]
        return self._out(scalar, -0.5 * LOG_2PI - 0.5 * m[:, 1] - 0.5 * e * r2)

    def var_exp_grad(self, y, means, variances, rule=None):
        scalar, y, m, v = self._prep(y, means, variances)
        e, free = self._precision_factor(m[:, 1], v[:, 1])
        resid = y - m[:, 0]
        r2 = resid ** 2 + v[:, 0]
        gm = np.stack([e * resid, -0.5 + 0.5 * e * r2 * free], -1)
        gv = np.stack([-0.5 * e, -0.25 * e * r2 * free], -1)
        return self._out(scalar, gm, gv)

    def _moments(self, m, v, rule):
        return m[:, 0], v[:, 0] + np.exp(m[:, 1] + 0.5 * v[:, 1])

    def _sample(self, F, rng):
        return F[:, 0] + np.exp(0.5 * F[:, 1]) * rng.standard_normal(F.shape[0])


_REGISTRY = {cls.name: cls for cls in (Bernoulli, Poisson, HetGaussian)}


def likelihood_from_name(name: str) -> Likelihood:
    try:
        return _REGISTRY[name.strip().lower()]()
    except KeyError:
        raise ValueError(f"unknown likelihood {name!r}; expected one of {sorted(_REGISTRY)}") from None


def latent_offsets(likelihoods) -> np.ndarray:
    """Flat index of the first latent function of each output, plus the total J."""
    return np.concatenate([[0], np.cumsum([lik.latent_count for lik in likelihoods])]).astype(int)
