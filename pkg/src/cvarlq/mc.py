"""Monte-Carlo rollouts with common random numbers and cost statistics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import dp
from .errors import BadAlpha, NonFiniteCost
from .model import Gaussian, ScaledRademacher, Uniform, zero_policy_bound
from .policy import AcvarCertified, LinearFeedback, ZeroPolicy, initial_budget, rollout_batch
from .riccati import acvar_recursion, critical_gamma, leqr_recursion, lqr_recursion
from .rng import SeedSchedule

CSV_COLUMNS = ["family", "parameter", "trials", "mean", "std", "stderr", "cvar_alpha", "alpha", "seed"]


def empirical_cvar(samples, alpha):
    """Mean of the largest ``ceil(alpha * K)`` samples."""
    if not 0.0 < alpha <= 1.0:
        raise BadAlpha(alpha)
    z = np.sort(np.asarray(samples, dtype=float).reshape(-1))[::-1]
    if z.size == 0:
        raise ValueError("empirical_cvar of an empty sample")
    k = max(1, math.ceil(alpha * z.size - 1e-9))
    return math.fsum(z[:k]) / k


def _mean_std(z):
    K = z.size
    mean = math.fsum(z) / K
    if K < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((z - mean) ** 2) / (K - 1))


@dataclass(frozen=True)
class RolloutStats:
    trials: int
    mean: float
    std: float
    standard_error: float
    cvar: dict
    std_defined: bool = True
    samples: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def from_samples(cls, Z, alphas=(0.05,), keep=True):
        Z = np.asarray(Z, dtype=float)
        mean, std = _mean_std(Z)
        cvar = {float(a): empirical_cvar(Z, a) for a in sorted(set(alphas) | {1.0})}
        return cls(Z.size, mean, std, std / math.sqrt(Z.size), cvar, Z.size > 1, Z if keep else None)


def simulate_costs(problem, policy, dist, x0, s0, trials, seeds, first_trial=0):
    """Return the cumulative cost Z of each trial as an array of length ``trials``."""
    n = problem.n
    idx = np.arange(first_trial, first_trial + trials)
    X = np.tile(np.asarray(x0, dtype=float).reshape(1, n), (trials, 1))
    S = np.full(trials, float(s0))
    Z = np.zeros(trials)
    for t in range(problem.N):
        W = dist.transform(seeds.uniforms(idx, t, n))
        X, S, _, C = rollout_batch(policy, X, S, t, W, problem)
        Z += C
    Z += np.einsum("ki,ij,kj->k", X, problem.Qf, X)
    bad = np.nonzero(~np.isfinite(Z))[0]
    if bad.size:
        raise NonFiniteCost(int(idx[bad[0]]))
    return Z


def simulate(problem, policy, dist, x0, s0, trials, seeds, alphas=(0.05,)):
    """Roll ``policy`` for ``trials`` CRN trials and summarize the cost Z."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    Z = simulate_costs(problem, policy, dist, x0, s0, trials, seeds)
    return RolloutStats.from_samples(Z, alphas)


@dataclass(frozen=True)
class BoundCheck:
    label: str
    excess_mean: float
    stderr: float
    a0: float
    margin: float
    passed: bool


def validate_bound(problem, schedule, dists, x0, trials, seeds):
    """Check ``E[max(Z - s0, 0)] <= a_0 + 4 stderr`` for the ACVaR policy with ``s0 = x0'P_0x0``."""
    s0 = initial_budget(x0, schedule)
    policy = AcvarCertified(schedule, problem, certify=False)
    out = []
    for dist in dists:
        dist.check_member(problem.Sigma)
        Z = simulate_costs(problem, policy, dist, x0, s0, trials, seeds)
        Y = np.maximum(Z - s0, 0.0)
        mean, std = _mean_std(Y)
        se = std / math.sqrt(Y.size)
        a0 = float(schedule.a[0])
        out.append(BoundCheck(dist.label(), mean, se, a0, a0 + 4 * se - mean, mean <= a0 + 4 * se))
    return out


def standard_dists(Sigma=1.0):
    """Gaussian, Rademacher and uniform members of the scalar ambiguity set with variance Sigma."""
    sd = math.sqrt(float(np.asarray(Sigma).reshape(-1)[0]))
    return [Gaussian(sd ** 2), ScaledRademacher([sd]), Uniform([sd * math.sqrt(3.0)])]


@dataclass(frozen=True)
class SweepRow:
    family: str
    parameter: float
    stats: RolloutStats


@dataclass
class SweepResult:
    rows: list
    gamma_c: float
    seed: int
    alphas: tuple
    meta: dict = field(default_factory=dict)

    def family(self, name):
        return [r for r in self.rows if r.family == name]

    def to_csv(self):
        """One line per (row, alpha); floats use repr so they parse back exactly."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for a in self.alphas:
            for r in self.rows:
                st = r.stats
                w.writerow([r.family, repr(float(r.parameter)), st.trials, repr(st.mean), repr(st.std),
                            repr(st.standard_error), repr(st.cvar[float(a)]), repr(float(a)), self.seed])
        return buf.getvalue()


def read_csv(text):
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({
            "family": rec["family"],
            "parameter": float(rec["parameter"]),
            "trials": int(rec["trials"]),
            "mean": float(rec["mean"]),
            "std": float(rec["std"]),
            "stderr": float(rec["stderr"]),
            "cvar_alpha": float(rec["cvar_alpha"]),
            "alpha": float(rec["alpha"]),
            "seed": int(rec["seed"]),
        })
    return rows


def exact_cvar_policies(problem, x0, exact_alphas, grids, quad_order=16):
    """Grid policies of the known-distribution CVaR controller, one per alpha.

    Returns a list of ``(alpha, policy, s0)``. The value function does not
    depend on alpha, so a single value iteration serves every level.
    """
    std = math.sqrt(float(problem.Sigma[0, 0]))
    vg = dp.known_dist_value_iteration(problem, std, quad_order, grids)
    policy = dp.extract_policy(vg)
    out = []
    for alpha in exact_alphas:
        s0, _ = dp.cvar_initial_budget(vg, x0, alpha)
        out.append((alpha, policy, s0))
    return out


def default_gammas(gamma_c, count=8):
    return list(np.geomspace(gamma_c / 10.0, gamma_c, count))


def tradeoff_sweep(problem, x0, acvar_Ls, leqr_gammas=None, exact_alphas=(0.05, 0.3, 1.0), trials=50_000,
                   seeds=None, alphas=(0.05,), grids=None, dist=None, include_zero=True, gamma_tol=None):
    """Evaluate every policy family on the same CRN trials.

    ``leqr_gammas`` defaults to log-spaced values in [gamma_c/10, gamma_c];
    gammas above gamma_c are rejected.
    """
    seeds = seeds if seeds is not None else SeedSchedule(0)
    dist = dist if dist is not None else Gaussian(problem.Sigma)
    dist.check_member(problem.Sigma)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    gamma_c = critical_gamma(problem, tol=gamma_tol if gamma_tol is not None else 1e-12)
    if leqr_gammas is None:
        leqr_gammas = default_gammas(gamma_c)
    if any(g > gamma_c for g in leqr_gammas):
        raise ValueError(f"LEQR gammas must not exceed gamma_c={gamma_c!r}")
    alphas = tuple(float(a) for a in alphas)
    for a in alphas:
        if not 0.0 < a <= 1.0:
            raise BadAlpha(a)

    def run(policy, s0=0.0):
        return RolloutStats.from_samples(simulate_costs(problem, policy, dist, x0, s0, trials, seeds), alphas)

    rows = [SweepRow("lqr", 0.0, run(LinearFeedback(lqr_recursion(problem).K)))]
    for L in acvar_Ls:
        sch = acvar_recursion(problem, L * np.eye(problem.n))
        rows.append(SweepRow("acvar", float(L), run(AcvarCertified(sch, problem, certify=False),
                                                     initial_budget(x0, sch))))
    for g in leqr_gammas:
        sch = leqr_recursion(problem, g)
        if not sch.feasible:
            raise ValueError(f"LEQR infeasible at gamma={g!r}")
        rows.append(SweepRow("leqr", float(g), run(LinearFeedback(sch.K))))
    if exact_alphas:
        if problem.n != 1:
            raise dp.Unsupported("the exact CVaR controller needs a scalar problem")
        if grids is None:
            grids = dp.default_grid(problem, x_max=6.0, s_lim=(-5.0, 40.0), nx=241, ns=181, nu=101)
        for a, pol, s0 in exact_cvar_policies(problem, x0, exact_alphas, grids):
            rows.append(SweepRow("cvar", float(a), run(pol, s0)))
    if include_zero:
        rows.append(SweepRow("zero", 0.0, run(ZeroPolicy(problem.m))))
    meta = {"zero_policy_bound": zero_policy_bound(problem, x0)}
    return SweepResult(rows, gamma_c, seeds.master_seed, alphas, meta)
