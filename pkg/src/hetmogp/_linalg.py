import numpy as np
from scipy.linalg import cho_solve, solve_triangular

JITTER_BASE = 1e-8
JITTER_MAX = 1e-4


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a covariance stays indefinite after jitter escalation."""


def jitter_cholesky(K, scale=1.0, base=JITTER_BASE, max_jitter=JITTER_MAX, label="matrix"):
    """Lower Cholesky factor of ``K + jitter * scale * I``.

    The jitter starts at ``base`` and grows by decades up to ``max_jitter``.
    Returns the factor and the jitter that was used.
    """
    if not 0 < base <= max_jitter:
        raise ValueError(f"jitter must satisfy 0 < base <= max_jitter, got base={base}, max={max_jitter}")
    K = np.asarray(K, dtype=float)
    if not np.all(np.isfinite(K)):
        raise CholeskyError(f"{label}: non-finite entries")
    eye = np.eye(K.shape[0])
    jitter = base
    while True:
        try:
            return np.linalg.cholesky(K + jitter * scale * eye), jitter
        except np.linalg.LinAlgError:
            if jitter >= max_jitter * (1 - 1e-12):
                raise CholeskyError(
                    f"{label}: Cholesky failed with jitter up to {max_jitter:g}") from None
            jitter *= 10.0


def tri_solve(L, B, trans=False):
    return solve_triangular(L, B, lower=True, trans=1 if trans else 0, check_finite=False)


def chol_inv_apply(L, B):
    """``K^{-1} B`` given the lower Cholesky factor of ``K``."""
    return cho_solve((L, True), B, check_finite=False)
