"""Problem instances, disturbance families and the zero-policy cost bound.

The system is ``x[t+1] = A x[t] + B u[t] + w[t]`` with stage cost
``x'Qx + u'Ru`` and terminal cost ``x'Qf x``. Disturbances are zero mean
with covariance bounded above by ``Sigma``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import _linalg as la
from .errors import (
    BadHorizon,
    DimensionMismatch,
    InvalidProblem,
    NotInAmbiguitySet,
    NotPositiveDefinite,
)


def _as_matrix(value, name):
    M = np.array(value, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(-1, 1)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    M.setflags(write=False)
    return M


@dataclass(frozen=True, eq=False)
class LqProblem:
    """Finite-horizon linear-quadratic problem data.

    Scalars and 1-D inputs are promoted to matrices. Construction does not
    validate; call :func:`validate` or :meth:`check`.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    Sigma: np.ndarray
    N: int

    def __post_init__(self):
        for name in ("A", "B", "Q", "R", "Qf", "Sigma"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def check(self, allow_empty_horizon=False):
        issues = validate(self, allow_empty_horizon=allow_empty_horizon)
        if issues:
            raise InvalidProblem(issues)
        return self

    def replace(self, **changes):
        data = {k: getattr(self, k) for k in ("A", "B", "Q", "R", "Qf", "Sigma", "N")}
        data.update(changes)
        return LqProblem(**data)

    def to_dict(self):
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
            "Qf": self.Qf.tolist(),
            "Sigma": self.Sigma.tolist(),
            "N": int(self.N),
        }

    @classmethod
    def from_dict(cls, doc):
        missing = [k for k in ("A", "B", "Q", "R", "Qf", "Sigma", "N") if k not in doc]
        if missing:
            raise KeyError(f"problem document missing fields: {', '.join(missing)}")
        for k in ("A", "B", "Q", "R", "Qf", "Sigma"):
            if not np.all(np.isfinite(np.asarray(doc[k], dtype=float))):
                raise ValueError(f"{k} contains non-finite entries")
        return cls(**{k: doc[k] for k in ("A", "B", "Q", "R", "Qf", "Sigma", "N")})

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def fig1_problem(Sigma=1.0, N=4):
    """The scalar benchmark ``x+ = x + u + w`` with R = Qf = 1, Q = 1e-3."""
    return LqProblem(A=1.0, B=1.0, Q=1e-3, R=1.0, Qf=1.0, Sigma=Sigma, N=N)


def validate(problem, allow_empty_horizon=False):
    """Return the list of violated invariants (empty when the problem is valid)."""
    issues = []
    n = problem.A.shape[0]
    if problem.A.shape[1] != n:
        issues.append(DimensionMismatch("A", detail=f"A is {problem.A.shape}, not square"))
    if problem.B.shape[0] != n:
        issues.append(DimensionMismatch("A", "B", detail=f"A is {problem.A.shape}, B is {problem.B.shape}"))
    m = problem.B.shape[1]
    for name, size in (("Q", n), ("Qf", n), ("Sigma", n), ("R", m)):
        M = getattr(problem, name)
        if M.shape != (size, size):
            ref = "B" if name == "R" else "A"
            issues.append(DimensionMismatch(ref, name, detail=f"{name} is {M.shape}, expected {(size, size)}"))
        elif not la.is_pd(M):
            issues.append(NotPositiveDefinite(name))
    N = problem.N
    lo = 0 if allow_empty_horizon else 1
    if isinstance(N, bool) or not isinstance(N, (int, np.integer)) or N < lo:
        issues.append(BadHorizon(N))
    return issues


def stage_cost(problem, x, u):
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != problem.n:
        raise DimensionMismatch("x", "Q")
    if u.shape[0] != problem.m:
        raise DimensionMismatch("u", "R")
    return float(x @ problem.Q @ x + u @ problem.R @ u)


def stage_costs(problem, X, U):
    """Row-wise stage costs for batches ``X`` (K, n) and ``U`` (K, m)."""
    return np.einsum("ki,ij,kj->k", X, problem.Q, X) + np.einsum("ki,ij,kj->k", U, problem.R, U)


def stacked_dynamics(A, N):
    """Return (F, G) with ``[x1; ...; xN] = F x0 + G [w0; ...; w(N-1)]`` under zero control."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(powers[-1] @ A)
    F = np.vstack(powers[1:]) if N else np.zeros((0, n))
    G = np.zeros((N * n, N * n))
    for i in range(N):
        for j in range(i + 1):
            G[i * n:(i + 1) * n, j * n:(j + 1) * n] = powers[i - j]
    return F, G


def zero_policy_bound(problem, x0):
    """Upper bound on E[Z] under the all-zero control for any admissible disturbance.

    Equality holds when every disturbance has covariance exactly Sigma.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != problem.n:
        raise DimensionMismatch("x0", "A")
    N, n = problem.N, problem.n
    F, G = stacked_dynamics(problem.A, N)
    Qbar = np.zeros((N * n, N * n))
    for i in range(N):
        Qbar[i * n:(i + 1) * n, i * n:(i + 1) * n] = problem.Qf if i == N - 1 else problem.Q
    Sbar = np.kron(np.eye(N), problem.Sigma)
    Fx = F @ x0
    return float(x0 @ problem.Q @ x0 + Fx @ Qbar @ Fx + np.trace(G @ Sbar @ G.T @ Qbar))


# ---------------------------------------------------------------------------
# Disturbance families
#
# Each draw at (trial, t) consumes exactly ``n`` uniforms from its own
# counter-based stream, so every family stays aligned across policies.


@dataclass(frozen=True, eq=False)
class Disturbance:
    def covariance(self):
        raise NotImplementedError

    def transform(self, U):
        """Map uniforms of shape (K, n) in (0, 1) to disturbance draws (K, n)."""
        raise NotImplementedError

    @property
    def dim(self):
        return self.covariance().shape[0]

    def check_member(self, Sigma):
        """Raise unless this distribution lies in the ambiguity set for ``Sigma``."""
        Sigma = _as_matrix(Sigma, "Sigma")
        cov = self.covariance()
        if cov.shape != Sigma.shape:
            raise DimensionMismatch("disturbance", "Sigma")
        if not la.is_psd(Sigma - cov, scale=float(np.trace(Sigma)) / Sigma.shape[0]):
            raise NotInAmbiguitySet(f"{self.label()} covariance exceeds Sigma")
        return self

    def label(self):
        return type(self).__name__


@dataclass(frozen=True, eq=False)
class Gaussian(Disturbance):
    cov: np.ndarray

    def __post_init__(self):
        cov = _as_matrix(self.cov, "cov")
        if not la.is_psd(cov):
            raise NotPositiveDefinite("cov")
        object.__setattr__(self, "cov", cov)
        # PSD square root via eigh; tolerates singular covariances
        lam, V = np.linalg.eigh(la.sym(cov))
        object.__setattr__(self, "_root", V * np.sqrt(np.clip(lam, 0.0, None)))

    def covariance(self):
        return self.cov

    def transform(self, U):
        return ndtri(U) @ self._root.T

    def label(self):
        return f"Gaussian(var={np.trace(self.cov) / self.cov.shape[0]:.4g})"


@dataclass(frozen=True, eq=False)
class ScaledRademacher(Disturbance):
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scale", np.atleast_1d(np.asarray(self.scale, dtype=float)))

    def covariance(self):
        return np.diag(self.scale ** 2)

    def transform(self, U):
        return np.where(U < 0.5, -1.0, 1.0) * self.scale

    def label(self):
        return f"Rademacher(scale={self.scale.tolist()})"


@dataclass(frozen=True, eq=False)
class Uniform(Disturbance):
    halfwidth: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "halfwidth", np.atleast_1d(np.asarray(self.halfwidth, dtype=float)))

    def covariance(self):
        return np.diag(self.halfwidth ** 2 / 3.0)

    def transform(self, U):
        return (2.0 * U - 1.0) * self.halfwidth

    def label(self):
        return f"Uniform(halfwidth={self.halfwidth.tolist()})"


@dataclass(frozen=True, eq=False)
class FiniteSupport(Disturbance):
    """Discrete distribution on ``points`` (k, n) with probabilities ``probs``.

    Sampling uses only the first uniform of each draw.
    """

    points: np.ndarray
    probs: np.ndarray
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if p.shape[0] != pts.shape[0]:
            raise DimensionMismatch("points", "probs")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be nonnegative and sum to 1")
        mean = p @ pts
        if np.max(np.abs(mean)) > 1e-12 * max(1.0, np.max(np.abs(pts))):
            raise ValueError("finite-support disturbance must have zero mean")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probs", p)
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    def covariance(self):
        return (self.points * self.probs[:, None]).T @ self.points

    def transform(self, U):
        idx = np.searchsorted(self._cdf, U[:, 0], side="right")
        return self.points[np.minimum(idx, len(self.probs) - 1)]

    def label(self):
        return f"FiniteSupport(k={len(self.probs)})"
