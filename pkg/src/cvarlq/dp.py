"""Value iteration on the augmented state (x, s) for scalar problems.

``V[N](x, s) = max(Qf x^2 - s, 0)`` and, backwards in t,
``V[t](x, s) = min_u sup_p sum_j p_j V[t+1](a x + b u + w_j, s - c(x, u))``.

The robust variant takes the sup over the moment polytope of probability
vectors on a finite support; the nominal variant uses one fixed weight
vector (e.g. Gauss-Hermite nodes for a Gaussian). The polytope does not
depend on the node, so its vertices are enumerated once and the inner sup
becomes a max over vertex weight vectors.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import lp
from .errors import DimensionMismatch, Unsupported
from .model import stage_cost
from .policy import GridPolicy

GOLDEN_ITERS = 48
CHUNK_ELEMS = 3_000_000


@dataclass(frozen=True, eq=False)
class Grid2:
    x_nodes: np.ndarray
    s_nodes: np.ndarray
    u_nodes: np.ndarray

    def __post_init__(self):
        for name in ("x_nodes", "s_nodes", "u_nodes"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if arr.size < 2 and name != "u_nodes":
                raise ValueError(f"{name} needs at least two nodes")
            if np.any(np.diff(arr) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls, x_lim, s_lim, u_lim, nx, ns, nu):
        return cls(np.linspace(*x_lim, nx), np.linspace(*s_lim, ns), np.linspace(*u_lim, nu))

    @property
    def shape(self):
        return len(self.x_nodes), len(self.s_nodes), len(self.u_nodes)


@dataclass(frozen=True, eq=False)
class ValueGrid:
    grids: Grid2
    V: np.ndarray  # (N+1, nx, ns)
    policy_tables: np.ndarray  # (N, nx, ns)

    @property
    def N(self):
        return self.V.shape[0] - 1

    def value_at(self, t, x, s):
        return float(_Interpolator(self.grids, self.V[t]).__call__(np.asarray(x, float), np.asarray(s, float)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "s", "value", "u_star"])
        xs, ss = self.grids.x_nodes, self.grids.s_nodes
        for t in range(self.N + 1):
            for i, x in enumerate(xs):
                for j, s in enumerate(ss):
                    u = repr(float(self.policy_tables[t, i, j])) if t < self.N else ""
                    w.writerow([t, repr(float(x)), repr(float(s)), repr(float(self.V[t, i, j])), u])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class FiniteDisturbance:
    """Scalar support points with a second-moment cap ``sigma2``."""

    points: np.ndarray
    sigma2: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 2 and pts.shape[1] != 1:
            raise Unsupported("robust DP requires scalar disturbances")
        pts = pts.reshape(-1)
        if pts.size < 2:
            raise ValueError("need at least two support points")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    def polytope(self, objective=None):
        return lp.moment_polytope(self.points, self.sigma2, objective)

    def vertices(self):
        """Extreme points of the moment polytope, as columns of a (k, nv) array."""
        verts = lp.enumerate_vertices(self.polytope())
        if not verts:
            raise lp.Infeasible("moment polytope is empty")
        return np.array(verts).T


def _scalar(problem):
    if problem.n != 1 or problem.m != 1:
        raise Unsupported("robust DP requires scalar disturbances (n = m = 1)")
    problem.check()
    return (float(problem.A[0, 0]), float(problem.B[0, 0]), float(problem.Q[0, 0]),
            float(problem.R[0, 0]), float(problem.Qf[0, 0]))


class _Interpolator:
    """Bilinear interpolation of one value layer with the extrapolation rules.

    Below the s grid the value continues with slope -1 when ``s_min <= 0``
    (exact there, since the cost is nonnegative), otherwise it is held
    constant; above the s grid it is held constant. Outside the x grid the
    boundary cell is extended linearly plus a convex quadratic term from the
    three outermost nodes.
    """

    def __init__(self, grids, layer):
        self.x = grids.x_nodes
        self.s = grids.s_nodes
        self.V = layer
        x, V = self.x, layer
        if len(x) >= 3:
            d_hi = (V[-1] - V[-2]) / (x[-1] - x[-2]) - (V[-2] - V[-3]) / (x[-2] - x[-3])
            d_lo = (V[2] - V[1]) / (x[2] - x[1]) - (V[1] - V[0]) / (x[1] - x[0])
            self.c_hi = np.maximum(d_hi / (x[-1] - x[-3]), 0.0)
            self.c_lo = np.maximum(d_lo / (x[2] - x[0]), 0.0)
        else:
            self.c_hi = self.c_lo = np.zeros(len(self.s))
        self.slope_below = self.s[0] <= 0.0

    def __call__(self, xq, sq):
        x, s, V = self.x, self.s, self.V
        ix = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, len(x) - 2)
        fx = (xq - x[ix]) / (x[ix + 1] - x[ix])
        js = np.clip(np.searchsorted(s, sq, side="right") - 1, 0, len(s) - 2)
        fs = np.clip((sq - s[js]) / (s[js + 1] - s[js]), 0.0, 1.0)
        lo = V[ix, js] + fs * (V[ix, js + 1] - V[ix, js])
        hi = V[ix + 1, js] + fs * (V[ix + 1, js + 1] - V[ix + 1, js])
        out = lo + fx * (hi - lo)
        above = xq > x[-1]
        below = xq < x[0]
        if np.any(above) or np.any(below):
            c_hi = self.c_hi[js] + fs * (self.c_hi[js + 1] - self.c_hi[js])
            c_lo = self.c_lo[js] + fs * (self.c_lo[js + 1] - self.c_lo[js])
            out = out + np.where(above, c_hi * (xq - x[-1]) * (xq - x[-2]), 0.0)
            out = out + np.where(below, c_lo * (x[0] - xq) * (x[1] - xq), 0.0)
        if self.slope_below:
            out = out + np.maximum(s[0] - sq, 0.0)
        return out


class _Terminal:
    def __init__(self, qf):
        self.qf = qf

    def __call__(self, xq, sq):
        return np.maximum(self.qf * xq * xq - sq, 0.0)


def _tie_order(u_nodes):
    # smallest |u| first, then most negative
    return np.lexsort((u_nodes, np.abs(u_nodes)))


def _sweep(problem, grids, points, weights, refine=True):
    """Backward sweep; ``weights`` is (k, nv) and the inner step takes the max over columns."""
    a, b, q, r, qf = _scalar(problem)
    N = problem.N
    xs, ss, us = grids.x_nodes, grids.s_nodes, grids.u_nodes
    nx, ns, nu = len(xs), len(ss), len(us)
    w = np.asarray(points, dtype=float).reshape(-1)
    W = np.asarray(weights, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != w.size:
        raise DimensionMismatch("points", "weights")
    k = w.size

    V = np.empty((N + 1, nx, ns))
    V[N] = np.maximum(qf * xs[:, None] ** 2 - ss[None, :], 0.0)
    pol = np.empty((N, nx, ns))
    order = _tie_order(us)
    us_sorted = us[order]
    rows_per_chunk = max(1, CHUNK_ELEMS // (ns * nu * k))

    for t in range(N - 1, -1, -1):
        f_next = _Terminal(qf) if t == N - 1 else _Interpolator(grids, V[t + 1])

        def psi(X, S, U):
            # X, S, U broadcast to a common shape; returns sup over weight columns
            xn = (a * X + b * U)[..., None] + w
            sn = (S - q * X * X - r * U * U)[..., None]
            vals = f_next(xn, sn)
            return (vals @ W).max(axis=-1)

        for start in range(0, nx, rows_per_chunk):
            sl = slice(start, min(nx, start + rows_per_chunk))
            X = xs[sl][:, None, None]
            S = ss[None, :, None]
            U = us_sorted[None, None, :]
            vals = psi(X, S, U)  # (cx, ns, nu)
            best = vals.min(axis=-1, keepdims=True)
            tol = 1e-12 * np.maximum(1.0, np.abs(best))
            idx = np.argmax(vals <= best + tol, axis=-1)  # first in tie order
            vbest = np.take_along_axis(vals, idx[..., None], -1)[..., 0]
            ubest = us_sorted[idx]
            if refine and nu >= 3:
                ubest, vbest = _golden_refine(psi, xs[sl][:, None], ss[None, :], us, ubest, vbest)
            V[t, sl] = vbest
            pol[t, sl] = ubest
    return ValueGrid(grids, V, pol)


def _golden_refine(psi, X, S, us, u0, v0):
    """Golden-section polish over the grid cells adjacent to each grid argmin."""
    pos = np.searchsorted(us, u0)
    lo = us[np.clip(pos - 1, 0, len(us) - 1)]
    hi = us[np.clip(pos + 1, 0, len(us) - 1)]
    X = np.broadcast_to(X, u0.shape)
    S = np.broadcast_to(S, u0.shape)
    g = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - g * (hi - lo)
    d = lo + g * (hi - lo)
    fc, fd = psi(X, S, c), psi(X, S, d)
    for _ in range(GOLDEN_ITERS):
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = hi - g * (hi - lo)
        new_d = lo + g * (hi - lo)
        # reuse the surviving interior point
        c, d, fc_old, fd_old = new_c, new_d, fc, fd
        fc = np.where(left, psi(X, S, c), fd_old)
        fd = np.where(left, fc_old, psi(X, S, d))
    um = np.where(fc < fd, c, d)
    vm = np.minimum(fc, fd)
    better = vm < v0 - 1e-12 * np.maximum(1.0, np.abs(v0))
    return np.where(better, um, u0), np.where(better, vm, v0)


def robust_value_iteration(problem, dist, grids, *, refine=True):
    """Value iteration with the sup over the finite-support moment polytope."""
    _scalar(problem)
    return _sweep(problem, grids, dist.points, dist.vertices(), refine=refine)


def nominal_value_iteration(problem, points, probs, grids, *, refine=True):
    """Value iteration for a known finite distribution (no inner sup)."""
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError("probs must be a probability vector")
    return _sweep(problem, grids, points, probs, refine=refine)


def gauss_hermite(std, order):
    """Nodes and probability weights for N(0, std^2)."""
    z, wt = np.polynomial.hermite_e.hermegauss(order)
    return std * z, wt / wt.sum()


def known_dist_value_iteration(problem, gauss_std, quad_order, grids, *, refine=True):
    """Value iteration for a known zero-mean Gaussian disturbance via Gauss-Hermite quadrature."""
    _scalar(problem)
    if quad_order < 8:
        raise ValueError("quad_order must be at least 8")
    if gauss_std ** 2 > float(problem.Sigma[0, 0]) * (1 + 1e-12):
        raise ValueError("gauss_std^2 exceeds Sigma")
    pts, wts = gauss_hermite(gauss_std, quad_order)
    return _sweep(problem, grids, pts, wts, refine=refine)


def extract_policy(vg):
    return GridPolicy(vg.grids.x_nodes, vg.grids.s_nodes, vg.policy_tables)


def cvar_initial_budget(vg, x0, alpha):
    """Minimize ``s + V_0(x0, s) / alpha`` over the s nodes.

    Returns ``(s_star, objective)``; ties resolve to the smallest s.
    """
    x0 = float(np.asarray(x0, dtype=float).reshape(-1)[0])
    ss = vg.grids.s_nodes
    f = _Interpolator(vg.grids, vg.V[0])
    obj = ss + f(np.full_like(ss, x0), ss) / alpha
    best = obj.min()
    j = int(np.argmax(obj <= best + 1e-12 * max(1.0, abs(best))))
    return float(ss[j]), float(obj[j])


def check_invariants(vg, qf, tol=1e-9):
    """Check the structural properties of every layer; returns a dict of booleans."""
    V = vg.V
    xs, ss = vg.grids.x_nodes, vg.grids.s_nodes
    scale = max(1.0, float(np.max(np.abs(V))))
    terminal = np.array_equal(V[-1], np.maximum(qf * xs[:, None] ** 2 - ss[None, :], 0.0))
    nonneg = bool(np.all(V >= -tol * scale))
    s_mono = bool(np.all(np.diff(V, axis=2) <= tol * scale))
    h = np.diff(xs)
    slopes = np.diff(V, axis=1) / h[None, :, None]
    x_conv = bool(np.all(np.diff(slopes, axis=1) >= -tol * scale))
    return {"terminal": bool(terminal), "nonnegative": nonneg, "s_monotone": s_mono, "x_convex": x_conv}


@dataclass(frozen=True)
class BoundReport:
    passed: bool
    max_violation: float
    worst_node: tuple
    eps_grid: float
    min_margin: float

    def to_dict(self):
        return {"passed": self.passed, "max_violation": self.max_violation,
                "worst_node": list(self.worst_node), "eps_grid": self.eps_grid,
                "min_margin": self.min_margin}


def grid_error_bound(layer):
    """0.25 times the largest second difference along x and along s, plus 1e-8."""
    d2x = np.abs(np.diff(layer, n=2, axis=0)).max(initial=0.0)
    d2s = np.abs(np.diff(layer, n=2, axis=1)).max(initial=0.0)
    return 0.25 * (d2x + d2s) + 1e-8


def verify_upper_bound(vg, schedule):
    """Check ``V_0(x, s) <= a_0 + max(P_0 x^2 - s, 0) + eps_grid`` at every node."""
    xs, ss = vg.grids.x_nodes, vg.grids.s_nodes
    P0 = float(np.asarray(schedule.P[0]).reshape(-1)[0])
    bound = schedule.a[0] + np.maximum(P0 * xs[:, None] ** 2 - ss[None, :], 0.0)
    eps = grid_error_bound(vg.V[0])
    gap = vg.V[0] - bound
    i, j = np.unravel_index(np.argmax(gap), gap.shape)
    return BoundReport(
        passed=bool(np.all(gap <= eps)),
        max_violation=float(gap[i, j]),
        worst_node=(float(xs[i]), float(ss[j])),
        eps_grid=float(eps),
        min_margin=float(-gap.max()),
    )


class TreeTooLarge(Unsupported):
    pass


def w_recursion_oracle(problem, points, probs, policy, x, s):
    """E[max(Z - s, 0)] for a fixed finite distribution, computed two ways.

    Path enumeration over all k^N disturbance sequences is checked against
    the backward conditional-expectation recursion before returning.
    """
    a, b, q, r, qf = _scalar(problem)
    pts = np.asarray(points, dtype=float).reshape(-1)
    probs = np.asarray(probs, dtype=float).reshape(-1)
    N, k = problem.N, pts.size
    if N > 4 or k > 4:
        raise TreeTooLarge(f"tree with k={k}, N={N} exceeds k, N <= 4")

    def ctrl(xv, sv, t):
        return float(np.asarray(policy.control(np.array([xv]), sv, t)).reshape(-1)[0])

    total = 0.0
    for path in itertools.product(range(k), repeat=N):
        xv, sv, prob, Z = x, s, 1.0, 0.0
        for t, j in enumerate(path):
            u = ctrl(xv, sv, t)
            c = stage_cost(problem, [xv], [u])
            Z += c
            sv -= c
            xv = a * xv + b * u + pts[j]
            prob *= probs[j]
        Z += qf * xv * xv
        total += prob * max(Z - s, 0.0)

    def W(t, xv, sv):
        if t == N:
            return max(qf * xv * xv - sv, 0.0)
        u = ctrl(xv, sv, t)
        c = q * xv * xv + r * u * u
        return sum(probs[j] * W(t + 1, a * xv + b * u + pts[j], sv - c) for j in range(k))

    rec = W(0, float(x), float(s))
    if abs(total - rec) > 1e-10 * (1.0 + abs(total)):
        raise AssertionError(f"path enumeration {total!r} disagrees with recursion {rec!r}")
    return total


def default_grid(problem, x_max=6.0, s_lim=(-5.0, 40.0), nx=121, ns=121, nu=101):
    """Symmetric x grid, given s range, and a u grid spanning ``+-2 |K_lqr| x_max``."""
    from .riccati import lqr_recursion

    K = lqr_recursion(problem).K
    u_max = 2.0 * float(np.max(np.abs(K))) * x_max
    return Grid2.uniform((-x_max, x_max), s_lim, (-u_max, u_max), nx, ns, nu)
