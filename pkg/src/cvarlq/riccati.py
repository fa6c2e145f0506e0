"""Backward Riccati recursions: ACVaR, LEQR, soft-constrained LQ game and LQR.

Schedules store time-indexed arrays, ``P[t]`` for ``t = 0..N``; gains
``K[t]`` for ``t = 0..N-1`` act at time ``t``. Entries that a recursion
never reached (after an infeasible step) are NaN.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import _linalg as la
from .errors import ConditioningError, NoFeasibleGamma, NotPositiveDefinite, RNotIdentity
from .model import _as_matrix


def _cholesky(M):
    try:
        return np.linalg.cholesky(la.sym(M))
    except np.linalg.LinAlgError:
        return None


def _completed(M, problem, F=None):
    """Return (G, K) with G = M - MB(R + B'MB)^-1 B'M and K = -(R + B'MB)^-1 B'MA.

    G is formed as F (I + CC')^-1 F' with M = FF' and C = F'B R^-1/2, which is
    positive definite by construction; the subtraction form cancels badly once
    M is large along directions B can steer. K = -R^-1 B'GA is the same gain.
    A square-root factor F of M may be supplied instead of factoring M.
    """
    A, B, R = problem.A, problem.B, problem.R
    F = _cholesky(M) if F is None else F
    Rf = _cholesky(R)
    if F is None or Rf is None:
        return None, None
    C = F.T @ solve_triangular(Rf, B.T, lower=True).T
    W = np.eye(F.shape[0]) + C @ C.T
    G = la.sym(F @ np.linalg.solve(W, F.T))
    K = -la.spd_solve(R, B.T @ G @ A)
    return G, K


def _nan_stack(count, n):
    return np.full((count, n, n), np.nan)


def _schedule_doc(kind, params, arrays, extra=None):
    doc = {"family": kind, **params}
    for name, arr in arrays.items():
        doc[name] = {str(t): (None if np.isnan(arr[t]).any() else arr[t].tolist()) for t in range(len(arr))}
    if extra:
        doc.update(extra)
    return doc


@dataclass(frozen=True, eq=False)
class AcvarSchedule:
    L: np.ndarray
    P: np.ndarray  # (N+1, n, n)
    a: np.ndarray  # (N+1,)
    S: np.ndarray  # (N, n, n); S[t] pairs with P[t+1]
    K: np.ndarray  # (N, m, n)

    @property
    def N(self):
        return len(self.a) - 1

    def to_dict(self):
        return _schedule_doc(
            "acvar",
            {"L": self.L.tolist()},
            {"P": self.P, "S": self.S, "K": self.K},
            {"a": {str(t): float(v) for t, v in enumerate(self.a)}},
        )


@dataclass(frozen=True, eq=False)
class LeqrSchedule:
    gamma: float
    Pbar: np.ndarray  # (N+1, n, n)
    Ptilde: np.ndarray  # (N, n, n); Ptilde[t] = (Pbar[t+1]^-1 - gamma Sigma)^-1
    K: np.ndarray  # (N, m, n)
    feasible: bool
    failed_at: int | None = None

    def to_dict(self):
        return _schedule_doc(
            "leqr",
            {"gamma": self.gamma},
            {"Pbar": self.Pbar, "Ptilde": self.Ptilde, "K": self.K},
            {"feasible": self.feasible, "failed_at": self.failed_at},
        )


@dataclass(frozen=True, eq=False)
class LqGameSchedule:
    lam: float
    Phat: np.ndarray  # (N+1, n, n)
    feasible: bool
    failed_at: int | None = None

    def to_dict(self):
        return _schedule_doc(
            "lqgame",
            {"lambda": self.lam},
            {"Phat": self.Phat},
            {"feasible": self.feasible, "failed_at": self.failed_at},
        )


@dataclass(frozen=True, eq=False)
class LqrSchedule:
    P: np.ndarray  # (N+1, n, n)
    K: np.ndarray  # (N, m, n)

    def to_dict(self):
        return _schedule_doc("lqr", {}, {"P": self.P, "K": self.K})


def schedule_to_json(schedule):
    return json.dumps(schedule.to_dict())


def acvar_recursion(problem, L):
    """Riccati-like recursion parameterized by a PD risk matrix ``L``.

    ``P[t] = A'(P[t+1]^-1 + BR^-1B' - (P[t+1] + L)^-1)^-1 A + Q`` and
    ``a[t] = a[t+1] + tr(Sigma (P[t+1] + L))``. The inner inverse is formed
    through ``S = (P^-1 - (P + L)^-1)^-1 = P + P L^-1 P`` which avoids the
    cancellation of the direct difference when L is large.
    """
    problem.check(allow_empty_horizon=True)
    n, m, N = problem.n, problem.m, problem.N
    L = la.sym(_as_matrix(L, "L"))
    if L.shape != (n, n) or not la.is_pd(L):
        raise NotPositiveDefinite("L")
    Lf = la.chol(L)

    P = _nan_stack(N + 1, n)
    S = _nan_stack(N, n)
    K = np.full((N, m, n), np.nan)
    a = np.zeros(N + 1)
    P[N] = problem.Qf
    for t in range(N - 1, -1, -1):
        Pn = P[t + 1]
        St = la.sym(Pn + Pn @ cho_solve(Lf, Pn))
        # S = Fp (I + Fp' L^-1 Fp) Fp' gives a factor of S without factoring S,
        # whose condition number roughly squares every step
        Fp = _cholesky(Pn)
        E = None if Fp is None else _cholesky(np.eye(n) + Fp.T @ cho_solve(Lf, Fp))
        G, Kt = (None, None) if E is None else _completed(St, problem, F=Fp @ E)
        if G is None:
            raise ConditioningError("R + B'SB lost positive definiteness", t)
        Pt = la.sym(problem.A.T @ G @ problem.A + problem.Q)
        if not la.is_pd(Pt):
            raise ConditioningError("P lost positive definiteness", t)
        S[t], K[t], P[t] = St, Kt, Pt
        a[t] = a[t + 1] + float(np.trace(problem.Sigma @ (Pn + L)))
    return AcvarSchedule(L=L, P=P, a=a, S=S, K=K)


def leqr_feasible_step(Pnext, gamma, Sigma_inv):
    return la.is_pd(Sigma_inv - gamma * Pnext)


def leqr_recursion(problem, gamma):
    """Linear-exponential-quadratic regulator recursion.

    Stops at the first ``t`` where ``Sigma^-1 - gamma P[t+1]`` is not PD and
    reports ``feasible=False`` with ``failed_at=t``.
    """
    problem.check(allow_empty_horizon=True)
    gamma = float(gamma)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    n, m, N = problem.n, problem.m, problem.N
    Sigma_inv = la.spd_inv(problem.Sigma)
    Pbar = _nan_stack(N + 1, n)
    Pt = _nan_stack(N, n)
    K = np.full((N, m, n), np.nan)
    Pbar[N] = problem.Qf
    for t in range(N - 1, -1, -1):
        Pn = Pbar[t + 1]
        if not leqr_feasible_step(Pn, gamma, Sigma_inv):
            return LeqrSchedule(gamma, Pbar, Pt, K, feasible=False, failed_at=t)
        inner = la.sym(la.spd_inv(Pn) - gamma * problem.Sigma)
        if not la.is_pd(inner):
            return LeqrSchedule(gamma, Pbar, Pt, K, feasible=False, failed_at=t)
        Ptil = la.spd_inv(inner)
        G, Kt = _completed(Ptil, problem)
        if G is None:
            raise ConditioningError("R + B'P~B lost positive definiteness", t)
        Pt[t], K[t] = Ptil, Kt
        Pbar[t] = _scaled_cov_step(Pn, problem, gamma * problem.Sigma)
        if not np.all(np.isfinite(Pbar[t])):
            return LeqrSchedule(gamma, Pbar, Pt, K, feasible=False, failed_at=t)
    return LeqrSchedule(gamma, Pbar, Pt, K, feasible=True)


def _scaled_cov_step(Pn, problem, D):
    """A'(Pn^-1 + BR^-1B' - D)^-1 A + Q with general (possibly indefinite) solves.

    Shared by the LEQR and LQ-game recursions so the two agree bit-for-bit
    whenever ``D`` coincides.
    """
    n = problem.n
    BRB = problem.B @ np.linalg.solve(problem.R, problem.B.T)
    inner = np.linalg.solve(Pn, np.eye(n)) + BRB - D
    inner = 0.5 * (inner + inner.T)
    X = np.linalg.solve(inner, problem.A)
    return la.sym(problem.A.T @ X + problem.Q)


def _invertible(M):
    sv = np.linalg.svd(M, compute_uv=False)
    return bool(np.all(np.isfinite(sv)) and sv[-1] > 1e-12 * sv[0])


def lq_game_recursion(problem, lam):
    """Soft-constrained LQ game recursion with attenuation level ``lam`` (requires R = I)."""
    problem.check(allow_empty_horizon=True)
    lam = float(lam)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not np.array_equal(problem.R, np.eye(problem.m)):
        raise RNotIdentity("the LQ-game recursion is defined for R = I")
    n, N = problem.n, problem.N
    D = problem.Sigma / lam ** 2
    BRB = problem.B @ np.linalg.solve(problem.R, problem.B.T)
    Phat = _nan_stack(N + 1, n)
    Phat[N] = problem.Qf
    for t in range(N - 1, -1, -1):
        Pn = Phat[t + 1]
        if not _invertible(Pn):
            return LqGameSchedule(lam, Phat, feasible=False, failed_at=t)
        inner = np.linalg.solve(Pn, np.eye(n)) + BRB - D
        if not _invertible(0.5 * (inner + inner.T)):
            return LqGameSchedule(lam, Phat, feasible=False, failed_at=t)
        Phat[t] = _scaled_cov_step(Pn, problem, D)
        if not _invertible(Phat[t]):
            return LqGameSchedule(lam, Phat, feasible=False, failed_at=t)
    return LqGameSchedule(lam, Phat, feasible=True)


def lqr_recursion(problem):
    """Risk-neutral recursion ``P[t] = A' G~(P[t+1]) A + Q``."""
    problem.check(allow_empty_horizon=True)
    n, m, N = problem.n, problem.m, problem.N
    P = _nan_stack(N + 1, n)
    K = np.full((N, m, n), np.nan)
    P[N] = problem.Qf
    for t in range(N - 1, -1, -1):
        G, Kt = _completed(P[t + 1], problem)
        if G is None:
            raise ConditioningError("R + B'PB lost positive definiteness", t)
        P[t] = la.sym(problem.A.T @ G @ problem.A + problem.Q)
        K[t] = Kt
    return LqrSchedule(P=P, K=K)


def _leqr_feasible(problem, gamma, Sigma_inv, BRB):
    """Feasibility verdict of :func:`leqr_recursion` without forming gains."""
    A, Q = problem.A, problem.Q
    D = gamma * problem.Sigma
    eye = np.eye(problem.n)
    Pn = problem.Qf
    for _ in range(problem.N):
        if not leqr_feasible_step(Pn, gamma, Sigma_inv):
            return False
        Pinv = np.linalg.solve(Pn, eye)
        if not la.is_pd(Pinv - D):
            return False
        inner = Pinv + BRB - D
        Pn = la.sym(A.T @ np.linalg.solve(0.5 * (inner + inner.T), A) + Q)
        if not np.all(np.isfinite(Pn)):
            return False
    return True


def critical_gamma(problem, tol=1e-10, *, rtol=0.0, lo=1e-12):
    """Supremum of gamma for which the LEQR recursion stays feasible.

    Bisection until the bracket is narrower than ``max(tol, rtol * lo)``.
    Feasibility is monotone in gamma and fails for
    ``gamma >= 1/lambda_max(Sigma Qf)`` at the first step, which gives the
    initial upper bracket. Returns the feasible end.
    """
    problem.check()
    Sigma_inv = la.spd_inv(problem.Sigma)
    BRB = problem.B @ np.linalg.solve(problem.R, problem.B.T)
    feasible = lambda g: _leqr_feasible(problem, g, Sigma_inv, BRB)  # noqa: E731
    if not feasible(lo):
        raise NoFeasibleGamma(f"LEQR infeasible even at gamma={lo}")
    lam_max = float(np.max(np.linalg.eigvals(problem.Sigma @ problem.Qf).real))
    hi = 2.0 / lam_max
    # shrink lo upward geometrically for a tight starting bracket
    probe = hi / 2.0
    while probe > lo:
        if feasible(probe):
            lo = probe
            break
        hi = probe
        probe /= 2.0
    while hi - lo > max(tol, rtol * lo):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def acvar_lqr_limit_gap(problem, L_scale):
    """Relative Frobenius gap between P_0 of ACVaR(L = L_scale I) and of LQR."""
    P_lqr = lqr_recursion(problem).P[0]
    P_acv = acvar_recursion(problem, L_scale * np.eye(problem.n)).P[0]
    return float(np.linalg.norm(P_acv - P_lqr) / np.linalg.norm(P_lqr))


def gain_identity_residual(P_t, K_t, M, problem):
    """Return ``Q + K'RK + (A+BK)' M (A+BK) - P_t`` for a step of any recursion."""
    Acl = problem.A + problem.B @ K_t
    return problem.Q + K_t.T @ problem.R @ K_t + Acl.T @ M @ Acl - P_t
