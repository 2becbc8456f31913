"""Sparse variational inference for the heterogeneous LMC model.

Every latent process ``u_q`` has ``M`` inducing variables at shared inputs
``Z`` with a Gaussian posterior ``N(mu_q, L_q L_q^T)``. The evidence lower
bound is

    sum_d (N_d / |B_d|) sum_{n in B_d} E_q[log p(y_dn | f_d(x_dn))]
        - sum_q KL(q(u_q) || p(u_q))

and its gradient is propagated by hand through the marginals of ``q(f)``,
the Cholesky factors and the kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._linalg import chol_inv_apply, jitter_cholesky, tri_solve, JITTER_BASE
from .dataset import HeterogeneousDataset
from .kernels import RbfKernel, gram, gram_vjp
from .likelihoods import latent_offsets
from .prior import LmcCoefficients, _flat
from .quadrature import GhRule, gh_rule

PARAM_BLOCKS = ("mu", "L", "kern", "A", "Z")
VARIATIONAL_BLOCKS = ("mu", "L")
HYPER_BLOCKS = ("kern", "A", "Z")


@dataclass(frozen=True)
class InducingState:
    """Inducing inputs and the per-process variational Gaussians.

    ``L_raw[q]`` is lower triangular with the *log* of the Cholesky diagonal
    on its diagonal, so ``S_q = L_q L_q^T`` is positive definite for any
    value of the free parameters.
    """

    Z: np.ndarray
    mu: np.ndarray
    L_raw: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        mu = np.asarray(self.mu, dtype=float)
        L_raw = np.tril(np.asarray(self.L_raw, dtype=float))
        M = Z.shape[0]
        if M < 1 or not np.all(np.isfinite(Z)):
            raise ValueError("need at least one finite inducing input")
        if mu.ndim != 2 or mu.shape[1] != M or L_raw.shape != (mu.shape[0], M, M):
            raise ValueError(f"inconsistent inducing shapes: Z {Z.shape}, mu {mu.shape}, L {L_raw.shape}")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "L_raw", L_raw)

    @classmethod
    def from_cholesky(cls, Z, mu, L) -> "InducingState":
        L = np.array(L, dtype=float)
        d = np.diagonal(L, axis1=1, axis2=2)
        if np.any(d <= 0):
            raise ValueError("Cholesky factors need a positive diagonal")
        idx = np.arange(L.shape[1])
        L[:, idx, idx] = np.log(d)
        return cls(Z, mu, L)

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def Q(self) -> int:
        return self.mu.shape[0]

    @property
    def L(self) -> np.ndarray:
        L = self.L_raw.copy()
        idx = np.arange(self.M)
        L[:, idx, idx] = np.exp(L[:, idx, idx])
        return L

    @property
    def S(self) -> np.ndarray:
        L = self.L
        return L @ np.swapaxes(L, 1, 2)


@dataclass(frozen=True)
class LmcModel:
    likelihoods: tuple
    coeffs: LmcCoefficients
    kernels: tuple
    inducing: InducingState
    jitter: float = JITTER_BASE

    def __post_init__(self):
        object.__setattr__(self, "likelihoods", tuple(self.likelihoods))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        J = int(latent_offsets(self.likelihoods)[-1])
        if self.coeffs.J != J:
            raise ValueError(f"likelihood list needs J={J} latent functions, coefficients have {self.coeffs.J}")
        if not (len(self.kernels) == self.coeffs.Q == self.inducing.Q):
            raise ValueError(
                f"Q mismatch: {len(self.kernels)} kernels, {self.coeffs.Q} coefficient columns, "
                f"{self.inducing.Q} inducing blocks")

    @property
    def Q(self) -> int:
        return self.coeffs.Q

    @property
    def J(self) -> int:
        return self.coeffs.J

    @property
    def M(self) -> int:
        return self.inducing.M

    @property
    def input_dim(self) -> int:
        return self.inducing.Z.shape[1]

    # -- flat unconstrained parameters -------------------------------------
    def param_slices(self) -> dict:
        Q, M, p, J = self.Q, self.M, self.input_dim, self.J
        sizes = {
            "mu": Q * M,
            "L": Q * (M * (M + 1) // 2),
            "kern": sum(k.n_params for k in self.kernels),
            "A": J * Q,
            "Z": M * p,
        }
        out, start = {}, 0
        for name in PARAM_BLOCKS:
            out[name] = slice(start, start + sizes[name])
            start += sizes[name]
        return out

    def get_params(self) -> np.ndarray:
        tril = np.tril_indices(self.M)
        return np.concatenate([
            self.inducing.mu.ravel(),
            self.inducing.L_raw[:, tril[0], tril[1]].ravel(),
            np.concatenate([k.log_params() for k in self.kernels]),
            self.coeffs.A.ravel(),
            self.inducing.Z.ravel(),
        ])

    def with_params(self, theta) -> "LmcModel":
        theta = np.asarray(theta, dtype=float)
        sl = self.param_slices()
        if theta.shape != (sl["Z"].stop,):
            raise ValueError(f"expected {sl['Z'].stop} parameters, got {theta.shape}")
        Q, M = self.Q, self.M
        tril = np.tril_indices(M)
        L_raw = np.zeros((Q, M, M))
        L_raw[:, tril[0], tril[1]] = theta[sl["L"]].reshape(Q, -1)
        kern, pos = [], sl["kern"].start
        for k in self.kernels:
            kern.append(k.with_log_params(theta[pos:pos + k.n_params]))
            pos += k.n_params
        inducing = InducingState(theta[sl["Z"]].reshape(M, -1), theta[sl["mu"]].reshape(Q, M), L_raw)
        return replace(self, coeffs=LmcCoefficients(theta[sl["A"]].reshape(self.J, Q)),
                       kernels=tuple(kern), inducing=inducing)

    def block_mask(self, blocks) -> np.ndarray:
        sl = self.param_slices()
        mask = np.zeros(sl["Z"].stop, dtype=bool)
        for b in blocks:
            mask[sl[b]] = True
        return mask


@dataclass
class ElboReport:
    """``total = sum_d scale_factors[d] * data_terms[d] - sum_q kl_terms[q]``."""

    total: float
    data_terms: np.ndarray
    kl_terms: np.ndarray
    scale_factors: np.ndarray

    def as_record(self) -> dict:
        return {
            "total": float(self.total),
            "data_terms": [float(v) for v in self.data_terms],
            "kl_terms": [float(v) for v in self.kl_terms],
            "scale_factors": [float(v) for v in self.scale_factors],
        }


@dataclass
class _Factors:
    Kuu: list          # Gram matrices at Z without jitter
    chol: list         # Cholesky factors of the jittered Gram matrices
    jitter: list
    L: np.ndarray
    extras: dict = field(default_factory=dict)


def _factorise(model: LmcModel) -> _Factors:
    Z = model.inducing.Z
    Kuu, chol, jit = [], [], []
    for q, k in enumerate(model.kernels):
        K = gram(k, Z)
        Lk, j = jitter_cholesky(K, scale=k.variance, base=model.jitter, label=f"K_uu for q={q}")
        Kuu.append(K)
        chol.append(Lk)
        jit.append(j)
    return _Factors(Kuu, chol, jit, model.inducing.L)


def _projections(model, fac, X, q):
    """``Kxz``, ``W = Kxz Kuu^{-1}``, ``W L_q`` and the marginal variance part ``c``."""
    k = model.kernels[q]
    Kxz = gram(k, X, model.inducing.Z)
    W = chol_inv_apply(fac.chol[q], Kxz.T).T
    WL = W @ fac.L[q]
    c = k.variance - np.sum(W * Kxz, 1) + np.sum(WL * WL, 1)
    return Kxz, W, WL, c


def _check_X(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.input_dim:
        raise ValueError(f"inputs have dimension {X.shape[1]}, model expects {model.input_dim}")
    return X


def _marginals_many(model, fac, X, rows):
    """Means/variances (n, len(rows)) of ``q(f_i)`` at ``X`` for LPF rows ``rows``."""
    A = model.coeffs.A[rows]
    n = X.shape[0]
    means = np.zeros((n, len(rows)))
    variances = np.zeros((n, len(rows)))
    cache = []
    for q in range(model.Q):
        Kxz, W, WL, c = _projections(model, fac, X, q)
        m = W @ model.inducing.mu[q]
        means += np.outer(m, A[:, q])
        variances += np.outer(c, A[:, q] ** 2)
        cache.append((Kxz, W, WL, c, m))
    return means, np.maximum(variances, 0.0), cache


def q_f_marginals(model: LmcModel, i, X):
    """Posterior marginal means and variances of LPF ``i`` at inputs ``X``."""
    k = _flat(i)
    if not 0 <= k < model.J:
        raise IndexError(f"LPF index {k} out of range 0..{model.J - 1}")
    X = _check_X(model, X)
    m, v, _ = _marginals_many(model, _factorise(model), X, [k])
    return m[:, 0], v[:, 0]


def output_marginals(model: LmcModel, d: int, X, fac=None):
    """Marginals of every LPF of output ``d`` (0-based), each of shape (n, J_d)."""
    offsets = latent_offsets(model.likelihoods)
    X = _check_X(model, X)
    fac = fac or _factorise(model)
    m, v, _ = _marginals_many(model, fac, X, list(range(offsets[d], offsets[d + 1])))
    return m, v


def _kl_terms(model, fac):
    M = model.M
    out = np.zeros(model.Q)
    idx = np.arange(M)
    for q in range(model.Q):
        Lk = fac.chol[q]
        B = tri_solve(Lk, fac.L[q])
        a = tri_solve(Lk, model.inducing.mu[q])
        logdet_K = 2.0 * np.sum(np.log(np.diag(Lk)))
        logdet_S = 2.0 * np.sum(model.inducing.L_raw[q, idx, idx])
        out[q] = 0.5 * (np.sum(B * B) + a @ a - M + logdet_K - logdet_S)
    return out


def kl_inducing(model: LmcModel) -> np.ndarray:
    """``KL(N(mu_q, S_q) || N(0, K_q))`` for every latent process."""
    return _kl_terms(model, _factorise(model))


def _resolve_batch(model, data, batch):
    if len(data.likelihoods) != len(model.likelihoods):
        raise ValueError(f"dataset has {len(data.likelihoods)} outputs, model has {len(model.likelihoods)}")
    for d, (a, b) in enumerate(zip(data.likelihoods, model.likelihoods)):
        if type(a) is not type(b):
            raise ValueError(f"output {d}: dataset likelihood {a.name} != model likelihood {b.name}")
    rows, scales = [], []
    for d, N in enumerate(data.sizes):
        if batch is None or batch[d] is None:
            rows.append(None)
            scales.append(1.0)
            continue
        idx = np.asarray(batch[d], dtype=int)
        if N > 0 and idx.size == 0:
            raise ValueError(f"empty mini-batch for output {d} which has {N} observations")
        if idx.size and (idx.min() < 0 or idx.max() >= N):
            raise ValueError(f"mini-batch indices out of range for output {d}")
        rows.append(idx)
        scales.append(N / idx.size if idx.size else 1.0)
    return rows, np.array(scales)


def elbo(model: LmcModel, data: HeterogeneousDataset, batch=None,
         rule: GhRule | None = None) -> ElboReport:
    """Evidence lower bound, optionally on per-output mini-batches."""
    return _evaluate(model, data, batch, rule, need_grad=False)[0]


def elbo_grad(model: LmcModel, data: HeterogeneousDataset, batch=None,
              rule: GhRule | None = None):
    """ELBO report and its gradient w.r.t. :meth:`LmcModel.get_params`."""
    return _evaluate(model, data, batch, rule, need_grad=True)


def _evaluate(model, data, batch, rule, need_grad):
    rule = rule or gh_rule()
    rows_all, scales = _resolve_batch(model, data, batch)
    fac = _factorise(model)
    offsets = latent_offsets(model.likelihoods)
    Q, M = model.Q, model.M
    Z = model.inducing.Z
    A = model.coeffs.A
    mu = model.inducing.mu
    D = len(model.likelihoods)
    data_terms = np.zeros(D)

    if need_grad:
        d_mu = np.zeros((Q, M))
        d_S = np.zeros((Q, M, M))
        d_Kuu = [np.zeros((M, M)) for _ in range(Q)]
        d_kern = [np.zeros(k.n_params) for k in model.kernels]
        d_A = np.zeros_like(A)
        d_Z = np.zeros_like(Z)

    for d, lik in enumerate(model.likelihoods):
        X, y = data.X[d], data.Y[d]
        if rows_all[d] is not None:
            X, y = X[rows_all[d]], y[rows_all[d]]
        if X.shape[0] == 0:
            continue
        lpf_rows = list(range(offsets[d], offsets[d + 1]))
        means, variances, cache = _marginals_many(model, fac, X, lpf_rows)
        data_terms[d] = float(np.sum(lik.var_exp(y, means, variances, rule)))
        if not need_grad:
            continue
        gm, gv = lik.var_exp_grad(y, means, variances, rule)
        gm = scales[d] * np.asarray(gm).reshape(means.shape)
        gv = scales[d] * np.asarray(gv).reshape(means.shape)
        a = A[lpf_rows]  # (J_d, Q)
        for q in range(Q):
            k = model.kernels[q]
            Kxz, W, WL, c, m = cache[q]
            Gm = gm @ a[:, q]
            Gv = gv @ (a[:, q] ** 2)
            d_A[lpf_rows, q] += gm.T @ m + 2.0 * a[:, q] * (gv.T @ c)
            d_mu[q] += W.T @ Gm
            d_S[q] += W.T @ (Gv[:, None] * W)
            dW = np.outer(Gm, mu[q]) + Gv[:, None] * (2.0 * (WL @ fac.L[q].T) - Kxz)
            T = chol_inv_apply(fac.chol[q], dW.T)  # Kuu^{-1} dW^T
            dKxz = T.T - Gv[:, None] * W
            d_Kuu[q] -= (T @ W).T
            th, _, dz = gram_vjp(k, X, Z, Kxz, dKxz)
            th[0] += np.sum(Gv) * k.variance  # prior diagonal k(x, x) = variance
            d_kern[q] += th
            d_Z += dz

    kl = _kl_terms(model, fac)
    total = float(np.sum(scales * data_terms) - np.sum(kl))
    report = ElboReport(total, data_terms, kl, scales)
    if not need_grad:
        return report, None

    idx = np.arange(M)
    L = fac.L
    d_Lraw = np.zeros((Q, M, M))
    for q, k in enumerate(model.kernels):
        Lk = fac.chol[q]
        Kinv_mu = chol_inv_apply(Lk, mu[q])
        Kinv_L = chol_inv_apply(Lk, L[q])
        # KL gradients (the ELBO subtracts the KL)
        d_mu[q] -= Kinv_mu
        dL = 2.0 * d_S[q] @ L[q] - Kinv_L
        dL[idx, idx] += 1.0 / L[q][idx, idx]
        dL = np.tril(dL)
        dL[idx, idx] *= L[q][idx, idx]
        d_Lraw[q] = dL
        Kinv = chol_inv_apply(Lk, np.eye(M))
        P = Kinv_L @ L[q].T + np.outer(Kinv_mu, mu[q])  # K^{-1} (S + mu mu^T)
        d_Kuu[q] -= 0.5 * (Kinv - chol_inv_apply(Lk, P.T).T)
        th, dz1, dz2 = gram_vjp(k, Z, Z, fac.Kuu[q], d_Kuu[q])
        # jitter * variance * I also scales with the variance
        th[0] += fac.jitter[q] * k.variance * np.trace(d_Kuu[q])
        d_kern[q] += th
        d_Z += dz1 + dz2

    tril = np.tril_indices(M)
    grad = np.concatenate([
        d_mu.ravel(),
        d_Lraw[:, tril[0], tril[1]].ravel(),
        np.concatenate(d_kern),
        d_A.ravel(),
        d_Z.ravel(),
    ])
    return report, grad


def elbo_upper_guard(model: LmcModel, data: HeterogeneousDataset) -> float:
    """``sum_d sum_n sup_f log p(y_dn | f)``, a crude upper bound on the ELBO."""
    return float(sum(np.sum(lik.log_pdf_sup(y)) for lik, y in zip(model.likelihoods, data.Y)))


def spread_subsample(X, M: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``M`` rows of ``X`` chosen by greedy farthest-point sampling.

    The first row is drawn uniformly at random. Near-duplicate inducing
    inputs make ``K_uu`` numerically singular, which a plain random
    subsample does not prevent.
    """
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    dist = np.sum((X - X[chosen[0]]) ** 2, 1)
    for _ in range(M - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((X - X[nxt]) ** 2, 1))
    return np.array(chosen)


def init_model(likelihoods, data: HeterogeneousDataset, Q: int, M: int,
               rng: np.random.Generator, ard: bool = True,
               jitter: float = JITTER_BASE) -> LmcModel:
    """Initial model with ``q(u)`` equal to the prior.

    Inducing inputs are a spread-out subsample of the pooled training inputs,
    lengthscales start at half the per-dimension input standard deviation
    and coefficients are drawn i.i.d. from ``N(0, 1/Q)``.
    """
    likelihoods = list(likelihoods)
    pooled = np.vstack([x for x in data.X if x.shape[0]]) if any(data.sizes) else None
    if pooled is None:
        raise ValueError("cannot initialise a model without any training inputs")
    p = pooled.shape[1]
    sd = pooled.std(0)
    sd = np.where(sd > 0, sd, 1.0)
    if M <= pooled.shape[0]:
        Z = pooled[np.sort(spread_subsample(pooled / sd, M, rng))]
    else:
        lo, hi = pooled.min(0), pooled.max(0)
        extra = lo + (hi - lo) * rng.random((M - pooled.shape[0], p))
        Z = np.vstack([pooled, extra])
    ls = 0.5 * sd if ard else np.array([0.5 * float(np.mean(sd))])
    kernels = tuple(RbfKernel(1.0, ls.copy(), ard=ard) for _ in range(Q))
    J = int(latent_offsets(likelihoods)[-1])
    coeffs = LmcCoefficients.random(J, Q, rng)
    chols = []
    for k in kernels:
        Lk, _ = jitter_cholesky(gram(k, Z), scale=k.variance, base=jitter)
        chols.append(Lk)
    inducing = InducingState.from_cholesky(Z, np.zeros((Q, M)), np.array(chols))
    return LmcModel(tuple(likelihoods), coeffs, kernels, inducing, jitter)
