"""Rank-one linear model of coregionalisation over latent parameter functions.

Each latent parameter function (LPF) ``f_i`` with flat index ``i`` is
``sum_q a[i, q] u_q(x)`` where the ``u_q`` are independent zero-mean GPs
with RBF covariances. LPFs are ordered output-major: all ``J_1``
functions of output 1, then output 2, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import jitter_cholesky
from .dataset import HeterogeneousDataset
from .kernels import gram
from .likelihoods import Likelihood, latent_offsets

MAX_PRIOR_SIZE = 10_000


@dataclass(frozen=True)
class LpfIndex:
    """Position of LPF ``f_{d,j}``; ``d`` and ``j`` are 1-based, ``flat`` 0-based."""

    d: int
    j: int
    flat: int


def lpf_index(likelihoods, d: int, j: int) -> LpfIndex:
    if not 1 <= d <= len(likelihoods):
        raise IndexError(f"output index {d} out of range 1..{len(likelihoods)}")
    Jd = likelihoods[d - 1].latent_count
    if not 1 <= j <= Jd:
        raise IndexError(f"latent index {j} out of range 1..{Jd} for output {d}")
    return LpfIndex(d, j, int(latent_offsets(likelihoods)[d - 1]) + j - 1)


def lpf_from_flat(likelihoods, flat: int) -> LpfIndex:
    offsets = latent_offsets(likelihoods)
    if not 0 <= flat < offsets[-1]:
        raise IndexError(f"flat LPF index {flat} out of range 0..{offsets[-1] - 1}")
    d = int(np.searchsorted(offsets, flat, side="right"))
    return LpfIndex(d, flat - int(offsets[d - 1]) + 1, flat)


def all_lpfs(likelihoods) -> list[LpfIndex]:
    return [lpf_from_flat(likelihoods, i) for i in range(latent_offsets(likelihoods)[-1])]


@dataclass(frozen=True)
class LmcCoefficients:
    """Mixing weights ``A`` (J x Q); ``B_q = a_q a_q^T`` is rank one."""

    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.size == 0:
            raise ValueError("coefficient matrix must be a non-empty J x Q matrix")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def J(self) -> int:
        return self.A.shape[0]

    @property
    def Q(self) -> int:
        return self.A.shape[1]

    def coregionalisation(self, q: int) -> np.ndarray:
        a = self.A[:, q]
        return np.outer(a, a)

    @classmethod
    def random(cls, J: int, Q: int, rng: np.random.Generator) -> "LmcCoefficients":
        return cls(rng.standard_normal((J, Q)) / np.sqrt(Q))


def _flat(i) -> int:
    return i.flat if isinstance(i, LpfIndex) else int(i)


def _row(coeffs: LmcCoefficients, i) -> np.ndarray:
    k = _flat(i)
    if not 0 <= k < coeffs.J:
        raise IndexError(f"LPF index {k} out of range 0..{coeffs.J - 1}")
    return coeffs.A[k]


def _check_kernels(coeffs, kernels):
    if len(kernels) != coeffs.Q:
        raise ValueError(f"{len(kernels)} kernels for Q={coeffs.Q} latent processes")


def lpf_cross_cov(coeffs: LmcCoefficients, kernels, i, i2, X, X2) -> np.ndarray:
    """``cov[f_i(X), f_i2(X2)] = sum_q a[i,q] a[i2,q] k_q(X, X2)``."""
    _check_kernels(coeffs, kernels)
    a, b = _row(coeffs, i), _row(coeffs, i2)
    out = 0.0
    for q, k in enumerate(kernels):
        out = out + a[q] * b[q] * gram(k, X, X2)
    return out


def lpf_inducing_cross_cov(coeffs: LmcCoefficients, kernels, i, X, Z) -> np.ndarray:
    """``K_{f_i u}``: columns grouped by q, block q equal to ``a[i,q] k_q(X, Z)``."""
    _check_kernels(coeffs, kernels)
    a = _row(coeffs, i)
    return np.hstack([a[q] * gram(k, X, Z) for q, k in enumerate(kernels)])


def prior_full_cov(coeffs: LmcCoefficients, kernels, inputs) -> np.ndarray:
    """Joint prior covariance of all LPFs, LPF ``i`` observed at ``inputs[i]``."""
    _check_kernels(coeffs, kernels)
    if len(inputs) != coeffs.J:
        raise ValueError(f"need {coeffs.J} input sets, got {len(inputs)}")
    sizes = [len(x) for x in inputs]
    total = sum(sizes)
    if total > MAX_PRIOR_SIZE:
        raise MemoryError(f"prior covariance of size {total} exceeds the {MAX_PRIOR_SIZE} guard")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    K = np.zeros((total, total))
    for i in range(coeffs.J):
        for i2 in range(i, coeffs.J):
            block = lpf_cross_cov(coeffs, kernels, i, i2, inputs[i], inputs[i2])
            K[starts[i]:starts[i + 1], starts[i2]:starts[i2 + 1]] = block
            if i2 != i:
                K[starts[i2]:starts[i2 + 1], starts[i]:starts[i + 1]] = block.T
    return K


def prior_kronecker_cov(coeffs: LmcCoefficients, kernels, X) -> np.ndarray:
    """``sum_q B_q kron K_q`` for inputs shared by every LPF."""
    _check_kernels(coeffs, kernels)
    return sum(np.kron(coeffs.coregionalisation(q), gram(k, X)) for q, k in enumerate(kernels))


def sample_heterogeneous(coeffs: LmcCoefficients, kernels, likelihoods: list[Likelihood],
                         inputs, rng: np.random.Generator):
    """Draw latent functions and observations from the generative model.

    ``inputs[d]`` holds the inputs of output ``d``; every LPF of that output
    is evaluated there.

    Returns
    -------
    data : HeterogeneousDataset
    latents : list of ndarray
        ``latents[d]`` has shape (N_d, J_d).
    """
    offsets = latent_offsets(likelihoods)
    if offsets[-1] != coeffs.J:
        raise ValueError(f"likelihoods need J={offsets[-1]} LPFs, coefficients have {coeffs.J}")
    inputs = [np.asarray(x, dtype=float).reshape(len(x), -1) for x in inputs]
    per_lpf = [inputs[d] for d, lik in enumerate(likelihoods) for _ in range(lik.latent_count)]
    # LPFs with all-zero loadings have zero prior variance and stay exactly 0
    active = [i for i in range(coeffs.J) if np.any(coeffs.A[i] != 0)]
    sizes = [len(x) for x in per_lpf]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    f = np.zeros(starts[-1])
    if active:
        sub = LmcCoefficients(coeffs.A[active])
        K = prior_full_cov(sub, kernels, [per_lpf[i] for i in active])
        scale = max(float(np.max(np.diag(K))), 1.0) if K.size else 1.0
        L, _ = jitter_cholesky(K, scale=scale, label="prior covariance")
        draw = L @ rng.standard_normal(K.shape[0])
        pos = 0
        for i in active:
            f[starts[i]:starts[i + 1]] = draw[pos:pos + sizes[i]]
            pos += sizes[i]
    latents, ys = [], []
    pos = 0
    for d, lik in enumerate(likelihoods):
        n = inputs[d].shape[0]
        F = np.empty((n, lik.latent_count))
        for j in range(lik.latent_count):
            F[:, j] = f[pos:pos + n]
            pos += n
        latents.append(F)
        ys.append(lik.sample(F, rng) if n else np.zeros(0))
    return HeterogeneousDataset(list(likelihoods), inputs, ys), latents
