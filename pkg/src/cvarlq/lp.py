"""Dense two-phase simplex for small linear programs.

Solves ``max c'p`` subject to ``A_eq p = b_eq``, ``A_ub p <= b_ub`` and
``p >= 0``. Bland's rule is used for both the entering and leaving
variable, so the method terminates without cycling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CvarLqError, Unsupported

MAX_VARS = 64
MAX_ENUM_VARS = 10
PIVOT_RTOL = 1e-11


class LpError(CvarLqError):
    pass


class Infeasible(LpError):
    pass


class Unbounded(LpError):
    pass


class CycleLimitExceeded(LpError):
    pass


class TooLarge(LpError):
    pass


def _rows(M, k):
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((0, k))
    return np.atleast_2d(M)


@dataclass(frozen=True, eq=False)
class LpInstance:
    c: np.ndarray
    A_eq: np.ndarray = field(default=None)
    b_eq: np.ndarray = field(default=None)
    A_ub: np.ndarray = field(default=None)
    b_ub: np.ndarray = field(default=None)

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        k = c.shape[0]
        if k > MAX_VARS:
            raise TooLarge(f"{k} variables exceeds the limit of {MAX_VARS}")
        A_eq = _rows(self.A_eq if self.A_eq is not None else [], k)
        A_ub = _rows(self.A_ub if self.A_ub is not None else [], k)
        b_eq = np.asarray(self.b_eq if self.b_eq is not None else [], dtype=float).reshape(-1)
        b_ub = np.asarray(self.b_ub if self.b_ub is not None else [], dtype=float).reshape(-1)
        if A_eq.shape != (b_eq.shape[0], k) or A_ub.shape != (b_ub.shape[0], k):
            raise ValueError("constraint rows must have one column per variable and match rhs length")
        for arr in (c, A_eq, A_ub, b_eq, b_ub):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP data must be finite")
        for name, val in (("c", c), ("A_eq", A_eq), ("b_eq", b_eq), ("A_ub", A_ub), ("b_ub", b_ub)):
            object.__setattr__(self, name, val)

    @property
    def k(self):
        return self.c.shape[0]

    def residuals(self, p):
        """Largest violation of any constraint at ``p``."""
        viol = [0.0, float(np.max(-p, initial=0.0))]
        if self.A_eq.size:
            viol.append(float(np.max(np.abs(self.A_eq @ p - self.b_eq))))
        if self.A_ub.size:
            viol.append(float(np.max(self.A_ub @ p - self.b_ub, initial=0.0)))
        return max(viol)


@dataclass(frozen=True)
class LpResult:
    value: float
    p: np.ndarray
    iterations: int


def _pivot(T, r, j):
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _run(T, basis, cost, allowed, tol, limit):
    """Bland-rule primal simplex on tableau rows ``T = [A | b]`` maximizing ``cost``."""
    its = 0
    while True:
        d = cost - cost[basis] @ T[:, :-1]
        enter = next((j for j in range(len(cost)) if allowed[j] and d[j] > tol), None)
        if enter is None:
            return its
        col = T[:, enter]
        rows = np.nonzero(col > tol)[0]
        if rows.size == 0:
            raise Unbounded("objective is unbounded above")
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol * max(1.0, abs(best))]
        leave = min(ties, key=lambda i: basis[i])
        _pivot(T, leave, enter)
        basis[leave] = enter
        its += 1
        if its > limit:
            raise CycleLimitExceeded(f"no convergence after {limit} pivots")


def solve_max(inst):
    """Return an optimal basic feasible solution of ``inst``.

    Raises :class:`Infeasible` or :class:`Unbounded` as appropriate.
    """
    k = inst.k
    A = np.vstack([inst.A_eq, inst.A_ub])
    b = np.concatenate([inst.b_eq, inst.b_ub])
    n_eq, n_ub = inst.A_eq.shape[0], inst.A_ub.shape[0]
    r = n_eq + n_ub
    if r == 0:
        if np.any(inst.c > 0):
            raise Unbounded("objective is unbounded above")
        return LpResult(0.0, np.zeros(k), 0)
    # columns: original k | slacks n_ub | artificials r
    ncol = k + n_ub + r
    T = np.zeros((r, ncol + 1))
    T[:, :k] = A
    T[n_eq:, k:k + n_ub] = np.eye(n_ub)
    T[:, -1] = b
    neg = T[:, -1] < 0
    T[neg] *= -1.0
    T[:, k + n_ub:k + n_ub + r] = np.eye(r)
    basis = list(range(k + n_ub, ncol))
    tol = PIVOT_RTOL * max(1.0, float(np.max(np.abs(T))))
    limit = 50 * (ncol + r) + 1000

    # phase 1: maximize -(sum of artificials)
    cost1 = np.zeros(ncol)
    cost1[k + n_ub:] = -1.0
    allowed = np.ones(ncol, dtype=bool)
    its = _run(T, basis, cost1, allowed, tol, limit)
    infeas = float(np.sum(T[:, -1][np.array(basis) >= k + n_ub]))
    if infeas > 1e-9 * max(1.0, float(np.max(np.abs(b)))):
        raise Infeasible("constraints admit no nonnegative solution")

    # drive remaining artificials out of the basis; drop redundant rows
    keep = []
    for i in range(r):
        if basis[i] >= k + n_ub:
            cand = [j for j in range(k + n_ub) if abs(T[i, j]) > tol]
            if cand:
                _pivot(T, i, cand[0])
                basis[i] = cand[0]
                keep.append(i)
        else:
            keep.append(i)
    T = T[keep]
    basis = [basis[i] for i in keep]

    allowed[k + n_ub:] = False
    cost2 = np.zeros(ncol)
    cost2[:k] = inst.c
    its += _run(T, basis, cost2, allowed, tol, limit)
    x = np.zeros(ncol)
    x[basis] = T[:, -1]
    p = np.clip(x[:k], 0.0, None)
    return LpResult(float(inst.c @ p), p, its)


def enumerate_vertices(inst, tol=1e-10):
    """All vertices of the feasible polytope by exhaustive active-set enumeration.

    A point is a vertex when ``k`` linearly independent constraints are
    active at it; equalities are always active. Intended as a test oracle.
    """
    k = inst.k
    if k > MAX_ENUM_VARS:
        raise TooLarge(f"vertex enumeration limited to {MAX_ENUM_VARS} variables")
    ineq_rows = np.vstack([-np.eye(k), inst.A_ub])
    ineq_rhs = np.concatenate([np.zeros(k), inst.b_ub])
    n_eq = inst.A_eq.shape[0]
    out = []
    for size in range(max(0, k - n_eq), k + 1):
        for S in itertools.combinations(range(ineq_rows.shape[0]), size):
            M = np.vstack([inst.A_eq, ineq_rows[list(S)]])
            rhs = np.concatenate([inst.b_eq, ineq_rhs[list(S)]])
            if np.linalg.matrix_rank(M) < k:
                continue
            p, *_ = np.linalg.lstsq(M, rhs, rcond=None)
            if np.max(np.abs(M @ p - rhs), initial=0.0) > tol * max(1.0, np.max(np.abs(rhs), initial=0.0)):
                continue
            if inst.residuals(p) > tol:
                continue
            p = np.where(np.abs(p) <= tol, 0.0, p)
            if not any(np.allclose(p, q, atol=1e-9, rtol=0) for q in out):
                out.append(p)
    return out


def moment_polytope(points, sigma2, objective=None):
    """LP over probability vectors on scalar ``points`` with zero mean and second moment <= sigma2."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 2 and pts.shape[1] != 1:
        raise Unsupported("the moment constraint is linear only for scalar disturbances")
    pts = pts.reshape(-1)
    k = pts.shape[0]
    c = np.zeros(k) if objective is None else np.asarray(objective, dtype=float)
    return LpInstance(
        c=c,
        A_eq=np.vstack([np.ones(k), pts]),
        b_eq=np.array([1.0, 0.0]),
        A_ub=(pts ** 2)[None, :],
        b_ub=np.array([float(sigma2)]),
    )
