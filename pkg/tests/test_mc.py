import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvarlq import dp, mc
from cvarlq.errors import BadAlpha, NonFiniteCost
from cvarlq.model import Gaussian, ScaledRademacher, Uniform, fig1_problem, zero_policy_bound
from cvarlq.policy import LinearFeedback, ZeroPolicy
from cvarlq.riccati import acvar_recursion, critical_gamma, leqr_recursion, lqr_recursion
from cvarlq.rng import SeedSchedule
from oracles import exact_moments


def test_empirical_cvar_examples():
    s = np.arange(1.0, 11.0)
    assert mc.empirical_cvar(s, 0.2) == 9.5
    assert mc.empirical_cvar(s, 1.0) == 5.5
    assert mc.empirical_cvar(np.full(7, 3.25), 0.3) == 3.25
    assert mc.empirical_cvar(s, 0.05) == 10.0
    with pytest.raises(BadAlpha):
        mc.empirical_cvar(s, 0.0)
    with pytest.raises(BadAlpha):
        mc.empirical_cvar(s, 1.5)
    with pytest.raises(ValueError):
        mc.empirical_cvar([], 0.5)


def test_empirical_cvar_matches_rockafellar_uryasev_at_integer_tail():
    rng = np.random.default_rng(0)
    z = rng.exponential(size=200)
    alpha = 0.05  # alpha * K = 10
    ss = np.sort(z)
    ru = min(s + np.maximum(z - s, 0).mean() / alpha for s in ss)
    assert mc.empirical_cvar(z, alpha) == pytest.approx(ru, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50))
def test_cvar_monotone_in_alpha(samples):
    alphas = [0.01, 0.05, 0.2, 0.5, 0.9, 1.0]
    vals = [mc.empirical_cvar(samples, a) for a in alphas]
    assert all(x >= y - 1e-9 for x, y in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(math.fsum(samples) / len(samples), abs=1e-9)
    if np.std(samples) > 0:
        assert vals[1] >= vals[-1] - 1e-9


def test_rollout_stats():
    z = np.array([3.0, 1.0, 2.0, 6.0])
    st_ = mc.RolloutStats.from_samples(z, (0.25, 0.5))
    assert st_.mean == 3.0 and st_.std == pytest.approx(np.std(z, ddof=1))
    assert st_.standard_error == pytest.approx(st_.std / 2)
    assert st_.cvar == {0.25: 6.0, 0.5: 4.5, 1.0: 3.0}
    one = mc.RolloutStats.from_samples([4.0])
    assert one.std == 0.0 and one.std_defined is False


def test_statistics_are_order_independent():
    rng = np.random.default_rng(1)
    z = rng.lognormal(size=50_000) * 1e3
    a = mc.RolloutStats.from_samples(z)
    b = mc.RolloutStats.from_samples(rng.permutation(z))
    assert (a.mean, a.std, a.cvar) == (b.mean, b.std, b.cvar)


def test_gaussian_sampler_moments():
    W = Gaussian(4.0).transform(SeedSchedule(3).uniforms(np.arange(1_000_000), 0, 1)).ravel()
    assert abs(W.mean()) <= 4 * 2.0 / 1e3
    assert abs(W.var() / 4.0 - 1) <= 0.01


def test_inverse_normal_accuracy():
    from cvarlq.model import ndtri

    known = {0.975: 1.959963984540054, 0.5: 0.0, 1e-10: -6.361340902404056, 0.8413447460685429: 1.0}
    for u, z in known.items():
        assert abs(ndtri(u) - z) <= 1.2e-9


def test_crn_determinism_and_chunking():
    p = fig1_problem()
    pol = LinearFeedback(lqr_recursion(p).K)
    seeds = SeedSchedule(11)
    a = mc.simulate_costs(p, pol, Gaussian(1.0), [1.0], 0.0, 1000, seeds)
    b = mc.simulate_costs(p, pol, Gaussian(1.0), [1.0], 0.0, 1000, SeedSchedule(11))
    c = np.concatenate([mc.simulate_costs(p, pol, Gaussian(1.0), [1.0], 0.0, 400, seeds),
                        mc.simulate_costs(p, pol, Gaussian(1.0), [1.0], 0.0, 600, seeds, first_trial=400)])
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_crn_shared_across_policies():
    # with B = 0 the control does not move the state, so the terminal state reveals the noise
    p = fig1_problem().replace(B=0.0)
    seeds = SeedSchedule(12)
    z0 = mc.simulate_costs(p, ZeroPolicy(1), Gaussian(1.0), [1.0], 0.0, 500, seeds)
    z1 = mc.simulate_costs(p.replace(R=1e-300), LinearFeedback(np.full((4, 1, 1), 0.3)), Gaussian(1.0), [1.0],
                           0.0, 500, seeds)
    assert np.allclose(z0, z1, rtol=1e-12)


def test_zero_noise_lqr_rollout_is_deterministic():
    p = fig1_problem()
    sch = lqr_recursion(p)
    stats = mc.simulate(p, LinearFeedback(sch.K), Gaussian(0.0), [1.0], 0.0, 50, SeedSchedule(0))
    assert stats.std == 0.0
    assert stats.mean == pytest.approx(sch.P[0, 0, 0], rel=1e-13)


def test_zero_policy_mean_matches_bound():
    p = fig1_problem()
    stats = mc.simulate(p, ZeroPolicy(1), Gaussian(1.0), [1.0], 0.0, 200_000, SeedSchedule(4))
    assert abs(stats.mean - zero_policy_bound(p, [1.0])) <= 4 * stats.standard_error


def _std_se(z):
    m = z.mean()
    s2 = np.mean((z - m) ** 2)
    m4 = np.mean((z - m) ** 4)
    return math.sqrt((m4 - s2 ** 2) / (4 * s2 * z.size))


@pytest.mark.parametrize("family", ["lqr", "leqr_half", "leqr_near_critical", "acvar"])
def test_linear_policies_match_exact_moments(family):
    p = fig1_problem()
    if family == "lqr":
        K = lqr_recursion(p).K
    elif family == "acvar":
        K = acvar_recursion(p, 0.5).K
    else:
        gc = critical_gamma(p, tol=1e-12)
        K = leqr_recursion(p, gc * (0.5 if family == "leqr_half" else 0.99)).K
    z = mc.simulate_costs(p, LinearFeedback(K), Gaussian(1.0), [1.0], 0.0, 200_000, SeedSchedule(8))
    mean, std = exact_moments(p, K, [1.0])
    assert abs(z.mean() - mean) <= 4 * z.std(ddof=1) / math.sqrt(z.size)
    assert abs(z.std(ddof=1) - std) <= 4 * _std_se(z)


def test_nonfinite_cost_reports_trial():
    p = fig1_problem().replace(A=1e200)
    with pytest.raises(NonFiniteCost) as info:
        mc.simulate(p, ZeroPolicy(1), Gaussian(1.0), [1.0], 0.0, 10, SeedSchedule(0))
    assert info.value.trial == 0


def test_validate_bound_fig1():
    p = fig1_problem()
    sch = acvar_recursion(p, 1.0)
    rep = mc.validate_bound(p, sch, mc.standard_dists(1.0), [1.0], 20_000, SeedSchedule(9))
    assert len(rep) == 3 and all(r.passed for r in rep)
    det = mc.validate_bound(p, sch, [Gaussian(0.0)], [1.0], 10, SeedSchedule(9))[0]
    assert det.stderr == 0.0 and det.excess_mean <= sch.a[0]


def test_validate_bound_with_rademacher_and_uniform_members():
    dists = mc.standard_dists(2.0)
    assert [type(d) for d in dists] == [Gaussian, ScaledRademacher, Uniform]
    for d in dists:
        assert np.allclose(d.covariance(), 2.0)


@pytest.fixture(scope="module")
def small_sweep():
    p = fig1_problem()
    grids = dp.default_grid(p, nx=41, ns=31, nu=21)
    return mc.tradeoff_sweep(p, [1.0], [0.2, 1.0, 100.0], None, (0.05, 1.0), 2000, SeedSchedule(3),
                             alphas=(0.05, 0.3), grids=grids)


def test_sweep_families(small_sweep):
    res = small_sweep
    assert [r.family for r in res.rows].count("lqr") == 1
    assert len(res.family("acvar")) == 3 and len(res.family("leqr")) == 8 and len(res.family("cvar")) == 2
    gam = [r.parameter for r in res.family("leqr")]
    assert gam[0] == pytest.approx(res.gamma_c / 10) and gam[-1] == pytest.approx(res.gamma_c)
    assert res.meta["zero_policy_bound"] == pytest.approx(zero_policy_bound(fig1_problem(), [1.0]))


def test_sweep_csv_round_trip(small_sweep):
    text = small_sweep.to_csv()
    rows = mc.read_csv(text)
    assert len(rows) == 2 * len(small_sweep.rows)
    first = small_sweep.rows[0].stats
    assert rows[0]["mean"] == first.mean and rows[0]["cvar_alpha"] == first.cvar[0.05]
    assert text.splitlines()[0].split(",") == mc.CSV_COLUMNS
    rebuilt = "\n".join([",".join(mc.CSV_COLUMNS)] + [",".join(
        str(r[c]) if isinstance(r[c], (int, str)) else repr(r[c]) for c in mc.CSV_COLUMNS) for r in rows]) + "\n"
    assert rebuilt == text


def test_sweep_rejects_gamma_above_critical():
    p = fig1_problem()
    with pytest.raises(ValueError):
        mc.tradeoff_sweep(p, [1.0], [1.0], [2.0], (), 10, SeedSchedule(0))


def test_sweep_requires_scalar_for_exact_cvar():
    from cvarlq.errors import Unsupported
    from oracles import random_problem

    p = random_problem(np.random.default_rng(0), n=2, m=1, N=2)
    with pytest.raises(Unsupported):
        mc.tradeoff_sweep(p, [1.0, 0.0], [1.0], None, (0.05,), 10, SeedSchedule(0))
