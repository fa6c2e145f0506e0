"""Small dense linear-algebra helpers built on Cholesky factorizations."""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

PD_RTOL = 1e-12


def sym(M):
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def pd_threshold(M):
    n = M.shape[0]
    return PD_RTOL * max(1.0, float(np.trace(M)) / n)


def is_pd(M):
    """Cholesky-based positive-definiteness test after symmetrization.

    Fails if the factorization breaks down or any pivot falls below
    ``1e-12 * max(1, trace(M)/n)``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        return False
    S = sym(M)
    try:
        C = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return bool(np.min(np.diag(C)) ** 2 >= pd_threshold(S))


def is_psd(M, scale=1.0):
    """Test M >= 0, allowing eigenvalues down to ``-1e-12 * max(1, scale)``."""
    S = sym(M)
    return bool(np.linalg.eigvalsh(S)[0] >= -PD_RTOL * max(1.0, scale))


def chol(M):
    """Return a scipy Cholesky factor of sym(M) or ``None`` if M fails :func:`is_pd`."""
    S = sym(M)
    if not is_pd(S):
        return None
    return cho_factor(S, lower=True)


def chol_lower(M):
    """Lower-triangular F with sym(M) = FF', or ``None`` if M fails :func:`is_pd`."""
    S = sym(M)
    if not is_pd(S):
        return None
    return np.linalg.cholesky(S)


def spd_inv(M):
    """Inverse of an SPD matrix via Cholesky, symmetrized."""
    f = chol(M)
    if f is None:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return sym(cho_solve(f, np.eye(M.shape[0])))


def spd_solve(M, b):
    f = chol(M)
    if f is None:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return cho_solve(f, b)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b)))
