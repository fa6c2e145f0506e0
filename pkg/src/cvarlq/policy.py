"""Policies on the augmented state (x, s) and the LMI objects behind ACVaR synthesis.

The ACVaR controller at time t takes ``M11 = P[t+1] + L`` and
``M22 = max(h_hat, 0)`` and picks a control that makes the block matrix
returned by :func:`assemble_lmi` positive definite. The quadratic minimizer
``u = K[t] x`` always qualifies; the certificate records the smallest
eigenvalue as a numerical witness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space

from . import _linalg as la
from .errors import BadAlpha, CertificateFailed, DimensionMismatch, InnerMatrixNotPD
from .model import stage_cost, stage_costs

DELTA_RTOL = 1e-7
LMI_RTOL = 1e-9


def g_tilde(P_next, problem):
    """``P - PB(R + B'PB)^-1 B'P``; satisfies ``0 < G~ <= P``."""
    P = la.sym(P_next)
    PB = P @ problem.B
    return la.sym(P - PB @ la.spd_solve(problem.R + problem.B.T @ PB, PB.T))


def h_hat(x, s, M11, P_next, problem):
    """Bound on the M22 block under the relaxation M12 = 0.

    ``x'(A'(G~^-1 - M11^-1)^-1 A + Q)x - s``; requires ``M11 > G~``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    G = g_tilde(P_next, problem)
    try:
        inner = la.sym(la.spd_inv(G) - la.spd_inv(M11))
        core = la.spd_inv(inner)
    except np.linalg.LinAlgError as exc:
        raise InnerMatrixNotPD("G~^-1 - M11^-1 is not positive definite") from exc
    Ax = problem.A @ x
    return float(Ax @ core @ Ax + x @ problem.Q @ x - s)


def h_of_M(x, s, M11, M12, P_next, problem):
    """Schur-complement form of the M22 bound for a general off-diagonal block M12."""
    x = np.asarray(x, dtype=float).reshape(-1)
    G = g_tilde(P_next, problem)
    Ax = problem.A @ x
    d = np.asarray(M12, dtype=float).reshape(-1) - G @ Ax
    return float(x @ (problem.A.T @ G @ problem.A + problem.Q) @ x - s + d @ la.spd_solve(M11 - G, d))


def H_xs(x, s, P_next, problem):
    """The (n+1)x(n+1) matrix that M must dominate after eliminating the control."""
    x = np.asarray(x, dtype=float).reshape(-1)
    G = g_tilde(P_next, problem)
    GAx = G @ problem.A @ x
    n = problem.n
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = G
    out[:n, n] = GAx
    out[n, :n] = GAx
    out[n, n] = x @ (problem.A.T @ G @ problem.A + problem.Q) @ x - s
    return out


def _H_block(P_next, problem):
    A, B = problem.A, problem.B
    n, m = problem.n, problem.m
    AB = np.hstack([A, B])
    P = la.sym(P_next)
    H = np.zeros((2 * n + m, 2 * n + m))
    H[:n, :n] = P
    H[:n, n:] = P @ AB
    H[n:, :n] = AB.T @ P
    H[n:, n:] = AB.T @ P @ AB
    H[n:2 * n, n:2 * n] += problem.Q
    H[2 * n:, 2 * n:] += problem.R
    return la.sym(H)


def phi_matrix(x, s, M, P_next, problem):
    """The u-free block matrix for a full (n+1)x(n+1) multiplier ``M``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n, m = problem.n, problem.m
    if x.shape[0] != n or np.shape(M) != (n + 1, n + 1):
        raise DimensionMismatch("x", "M")
    Kx = np.zeros((2 * n + m, n + 1))
    Kx[:n, :n] = np.eye(n)
    Kx[n:2 * n, n] = x
    Gs = np.zeros((n + 1, n + 1))
    Gs[n, n] = -s
    Hinv = la.spd_inv(_H_block(P_next, problem))
    size = 3 * n + m + 1
    Phi = np.zeros((size, size))
    Phi[:n + 1, :n + 1] = np.asarray(M, dtype=float) - Gs
    Phi[n + 1:, :n + 1] = Kx
    Phi[:n + 1, n + 1:] = Kx.T
    Phi[n + 1:, n + 1:] = Hinv
    return la.sym(Phi)


def diag_multiplier(M11, M22):
    M11 = np.atleast_2d(np.asarray(M11, dtype=float))
    n = M11.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = M11
    M[n, n] = M22
    return M


def assemble_lmi(x, s, u, M11, M22, P_next, problem, M12=None):
    """Return ``Phi + Qbar' u Pbar + (Qbar' u Pbar)'`` of size 3n+m+1.

    ``u`` enters only the last m rows of column n (and its transpose).
    """
    n, m = problem.n, problem.m
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != m:
        raise DimensionMismatch("u", "B")
    M = diag_multiplier(M11, M22)
    if M12 is not None:
        M[:n, n] = M[n, :n] = np.asarray(M12, dtype=float).reshape(-1)
    out = phi_matrix(x, s, M, P_next, problem)
    out[3 * n + 1:, n] += u
    out[n, 3 * n + 1:] += u
    return out


def nullspace_projections(Phi, n, m):
    """Project Phi onto the null spaces of the selector row and of the control block.

    Returns ``(W_P' Phi W_P, W_Q' Phi W_Q)``.
    """
    size = 3 * n + m + 1
    Prow = np.zeros((1, size))
    Prow[0, n] = 1.0
    Qbar = np.zeros((m, size))
    Qbar[:, 3 * n + 1:] = np.eye(m)
    WP = null_space(Prow)
    WQ = null_space(Qbar)
    return WP.T @ Phi @ WP, WQ.T @ Phi @ WQ


@dataclass(frozen=True)
class LmiCertificate:
    t: int
    x: tuple
    s: float
    u: tuple
    M11: np.ndarray
    M22: float
    min_eig: float
    eps: float
    passed: bool

    def to_record(self):
        return {"t": self.t, "x": list(self.x), "s": self.s, "u": list(self.u),
                "min_eig": self.min_eig, "passed": self.passed}


def synthesize_acvar_control(x, s, t, schedule, problem, *, raise_on_fail=True):
    """Pick the ACVaR control at (x, s, t) and certify it against the LMI.

    The returned control is ``K[t] x`` (independent of s). ``M22`` is inflated
    by ``1e-7 * max(1, |h_hat|)`` so the LMI is strictly feasible; the
    certificate passes when the smallest eigenvalue is at least
    ``-1e-9 * (1 + ||Phi||_F)``.
    """
    if not 0 <= t < schedule.N:
        raise IndexError(f"t={t} outside 0..{schedule.N - 1}")
    x = np.asarray(x, dtype=float).reshape(-1)
    P_next = schedule.P[t + 1]
    M11 = P_next + schedule.L
    hh = h_hat(x, s, M11, P_next, problem)
    M22 = max(hh, 0.0) + DELTA_RTOL * max(1.0, abs(hh))
    u = schedule.K[t] @ x
    lmi = assemble_lmi(x, s, u, M11, M22, P_next, problem)
    eps = float(LMI_RTOL * (1.0 + np.linalg.norm(lmi)))
    min_eig = float(np.linalg.eigvalsh(lmi)[0])
    cert = LmiCertificate(t, tuple(x.tolist()), float(s), tuple(u.tolist()), M11, M22,
                          min_eig, eps, bool(min_eig >= -eps))
    if raise_on_fail and not cert.passed:
        raise CertificateFailed(min_eig, eps)
    return u, cert


def initial_budget(x0, schedule):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    return float(x0 @ schedule.P[0] @ x0)


def upper_bound_J(x0, alpha, schedule):
    """Closed-form ``inf_s s + (a_0 + max(x0'P_0x0 - s, 0)) / alpha``, attained at the kink."""
    if not 0.0 < alpha <= 1.0:
        raise BadAlpha(alpha)
    return initial_budget(x0, schedule) + schedule.a[0] / alpha


# ---------------------------------------------------------------------------
# Policies. ``control`` acts on one augmented state; ``controls`` acts on a
# batch X (K, n), S (K,) and returns (K, m).


class Policy:
    m = None

    def control(self, x, s, t):
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return self.controls(x, np.array([float(s)]), t)[0]

    def controls(self, X, S, t):
        raise NotImplementedError


class ZeroPolicy(Policy):
    def __init__(self, m):
        self.m = m

    def controls(self, X, S, t):
        return np.zeros((X.shape[0], self.m))


class LinearFeedback(Policy):
    """Time-varying gains ``u = K[t] x``."""

    def __init__(self, K):
        self.K = np.asarray(K, dtype=float)
        if self.K.ndim != 3:
            raise DimensionMismatch("K", detail="expected (N, m, n)")
        if not np.all(np.isfinite(self.K)):
            raise ValueError("gains must be finite")
        self.m = self.K.shape[1]

    def controls(self, X, S, t):
        return X @ self.K[t].T


class AcvarCertified(LinearFeedback):
    """ACVaR controller; optionally certifies every scalar call to :meth:`control`.

    Batched evaluation skips certification (one eigen-decomposition per
    state is too costly for long Monte-Carlo sweeps).
    """

    def __init__(self, schedule, problem, certify=True):
        super().__init__(schedule.K)
        self.schedule = schedule
        self.problem = problem
        self.certify = certify
        self.certificates = []

    def control(self, x, s, t):
        if not self.certify:
            return super().control(x, s, t)
        u, cert = synthesize_acvar_control(x, s, t, self.schedule, self.problem)
        self.certificates.append(cert)
        return u


class GridPolicy(Policy):
    """Tabulated scalar controls ``tables[t, i, j]`` at nodes ``(x_nodes[i], s_nodes[j])``.

    Lookups use the nearest node; states outside the grid map to the boundary.
    """

    def __init__(self, x_nodes, s_nodes, tables):
        self.x_nodes = np.asarray(x_nodes, dtype=float)
        self.s_nodes = np.asarray(s_nodes, dtype=float)
        self.tables = np.asarray(tables, dtype=float)
        if self.tables.shape[1:] != (len(self.x_nodes), len(self.s_nodes)):
            raise DimensionMismatch("tables", "grid")
        if not np.all(np.isfinite(self.tables)):
            raise ValueError("policy tables must be finite")
        self.m = 1

    @staticmethod
    def _nearest(nodes, q):
        j = np.clip(np.searchsorted(nodes, q), 1, len(nodes) - 1)
        left = nodes[j - 1]
        return np.where(q - left <= nodes[j] - q, j - 1, j)

    def controls(self, X, S, t):
        i = self._nearest(self.x_nodes, X[:, 0])
        j = self._nearest(self.s_nodes, np.asarray(S, dtype=float))
        return self.tables[t, i, j][:, None]


def rollout_step(policy, x, s, t, w, problem):
    """Advance the augmented state one step; returns (x_next, s_next, u, c)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    u = np.asarray(policy.control(x, s, t), dtype=float).reshape(-1)
    c = stage_cost(problem, x, u)
    x_next = problem.A @ x + problem.B @ u + w
    return x_next, s - c, u, c


def rollout_batch(policy, X, S, t, W, problem):
    U = policy.controls(X, S, t)
    C = stage_costs(problem, X, U)
    return X @ problem.A.T + U @ problem.B.T + W, S - C, U, C
