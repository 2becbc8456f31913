"""Squared-exponential (RBF) covariance with ARD lengthscales."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RbfKernel:
    """``k(x, x') = variance * exp(-0.5 * sum_i (x_i - x'_i)^2 / l_i^2)``.

    With ``ard=False`` a single lengthscale is shared by every input
    dimension and ``lengthscales`` has length one.
    """

    variance: float
    lengthscales: np.ndarray
    ard: bool = True

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        if not self.variance > 0 or not np.all(ls > 0):
            raise ValueError("kernel variance and lengthscales must be positive")
        if not self.ard and ls.size != 1:
            raise ValueError("a shared-lengthscale kernel takes exactly one lengthscale")

    @classmethod
    def isotropic(cls, variance: float, lengthscale: float) -> "RbfKernel":
        return cls(variance, np.array([lengthscale]), ard=False)

    @property
    def n_params(self) -> int:
        return 1 + self.lengthscales.size

    def log_params(self) -> np.ndarray:
        """Unconstrained parameters ``[log variance, log lengthscales...]``."""
        return np.concatenate([[np.log(self.variance)], np.log(self.lengthscales)])

    def with_log_params(self, theta) -> "RbfKernel":
        theta = np.asarray(theta, dtype=float)
        return RbfKernel(float(np.exp(theta[0])), np.exp(theta[1:]), ard=self.ard)

    def _scales(self, p: int) -> np.ndarray:
        if self.ard:
            if self.lengthscales.size != p:
                raise ValueError(
                    f"input dimension {p} does not match {self.lengthscales.size} lengthscales")
            return self.lengthscales
        return np.full(p, self.lengthscales[0])


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _check_dims(k: RbfKernel, X, X2):
    X, X2 = _as_2d(X), _as_2d(X2)
    if X.shape[1] != X2.shape[1]:
        raise ValueError(f"input dimensions differ: {X.shape[1]} vs {X2.shape[1]}")
    return X, X2, k._scales(X.shape[1])


def kernel_eval(k: RbfKernel, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValueError(f"input dimensions differ: {x.shape} vs {x2.shape}")
    ls = k._scales(x.size)
    r2 = np.sum(((x - x2) / ls) ** 2)
    return float(k.variance * np.exp(-0.5 * r2))


def _sqdist(X, X2, ls):
    A = X / ls
    B = X2 / ls
    r2 = (np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :]) - 2.0 * (A @ B.T)
    return np.maximum(r2, 0.0)


def gram(k: RbfKernel, X, X2=None) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(X[i], X2[j])``; ``X2=None`` means ``X2 = X``."""
    same = X2 is None
    X, X2, ls = _check_dims(k, X, X if same else X2)
    K = k.variance * np.exp(-0.5 * _sqdist(X, X2, ls))
    if same:
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, k.variance)
    return K


def gram_diag(k: RbfKernel, X) -> np.ndarray:
    return np.full(_as_2d(X).shape[0], k.variance)


def gram_grad(k: RbfKernel, X, X2=None) -> np.ndarray:
    """Derivatives of every Gram entry w.r.t. the log hyperparameters.

    Returns
    -------
    ndarray, shape (n_params, n, m)
        Slice 0 is d/d(log variance); the rest are d/d(log lengthscale_i)
        (a single slice when lengthscales are shared).
    """
    same = X2 is None
    X, X2, ls = _check_dims(k, X, X if same else X2)
    K = gram(k, X, None if same else X2)
    diff2 = ((X[:, None, :] - X2[None, :, :]) / ls) ** 2  # (n, m, p)
    dls = K[None] * np.moveaxis(diff2, 2, 0)
    if not k.ard:
        dls = dls.sum(0, keepdims=True)
    return np.concatenate([K[None], dls], axis=0)


def gram_vjp(k: RbfKernel, X, X2, K, dK):
    """Contract ``dK`` (an adjoint of ``K = gram(k, X, X2)``) with the Jacobian.

    Avoids materialising the (n_params, n, m) tensor of :func:`gram_grad`.

    Returns
    -------
    d_theta : ndarray, shape (n_params,)
    dX : ndarray, shape (n, p)
    dX2 : ndarray, shape (m, p)
    """
    X, X2, ls = _check_dims(k, X, X2)
    G = dK * K
    rows = G.sum(1)
    cols = G.sum(0)
    GX2 = G @ X2
    GtX = G.T @ X
    inv_l2 = 1.0 / ls ** 2
    # sum_{n,m} G_nm (x_ni - z_mi)^2 for each dimension i
    wdist = rows @ (X * X) + cols @ (X2 * X2) - 2.0 * np.sum(X * GX2, 0)
    dlog_ls = wdist * inv_l2
    if not k.ard:
        dlog_ls = np.atleast_1d(dlog_ls.sum())
    d_theta = np.concatenate([[G.sum()], dlog_ls])
    dX = -(rows[:, None] * X - GX2) * inv_l2
    dX2 = -(cols[:, None] * X2 - GtX) * inv_l2
    return d_theta, dX, dX2
