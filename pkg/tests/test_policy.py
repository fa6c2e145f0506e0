import json

import numpy as np
import pytest

from cvarlq import _linalg as la
from cvarlq.errors import BadAlpha, DimensionMismatch, InnerMatrixNotPD
from cvarlq.model import fig1_problem
from cvarlq.policy import (
    AcvarCertified,
    GridPolicy,
    H_xs,
    LinearFeedback,
    ZeroPolicy,
    assemble_lmi,
    diag_multiplier,
    g_tilde,
    h_hat,
    h_of_M,
    initial_budget,
    nullspace_projections,
    phi_matrix,
    rollout_batch,
    rollout_step,
    synthesize_acvar_control,
    upper_bound_J,
)
from cvarlq.riccati import acvar_recursion
from oracles import random_problem, random_spd


def test_g_tilde_examples():
    p = fig1_problem()
    assert g_tilde(np.eye(1), p)[0, 0] == pytest.approx(0.5, rel=1e-15)
    assert g_tilde(np.eye(1), p.replace(B=0.0))[0, 0] == 1.0
    assert g_tilde(np.eye(1), p.replace(R=1e12))[0, 0] == pytest.approx(1.0, abs=1e-11)


def test_g_tilde_between_zero_and_P():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = random_problem(rng)
        P = random_spd(rng, p.n)
        G = g_tilde(P, p)
        assert la.is_pd(G)
        assert np.linalg.eigvalsh(la.sym(P - G))[0] >= -1e-10 * np.linalg.norm(P)


def test_h_hat_examples():
    p = fig1_problem()
    assert h_hat([0.0], 3.0, np.array([[2.0]]), np.eye(1), p) == -3.0
    assert h_hat([1.0], 0.0, np.array([[2.0]]), np.eye(1), p) == pytest.approx(1 / 1.5 + 1e-3, rel=1e-14)
    with pytest.raises(InnerMatrixNotPD):
        h_hat([1.0], 0.0, np.array([[0.4]]), np.eye(1), p)


def test_schur_identity():
    rng = np.random.default_rng(1)
    for _ in range(300):
        p = random_problem(rng, N=2)
        P = random_spd(rng, p.n)
        M11 = P + random_spd(rng, p.n, 0.01, 2.0)
        x, s = rng.standard_normal(p.n), float(rng.normal(0, 3))
        a = h_hat(x, s, M11, P, p)
        b = h_of_M(x, s, M11, np.zeros(p.n), P, p)
        assert abs(a - b) <= 1e-10 * (1 + abs(a))


def test_h_of_M_minimized_by_G_A_x():
    # M12 = G~ A x gives the smallest h over all off-diagonal blocks
    rng = np.random.default_rng(2)
    p = random_problem(rng, n=3, m=2, N=1)
    P = random_spd(rng, 3)
    M11 = P + np.eye(3)
    x = rng.standard_normal(3)
    G = g_tilde(P, p)
    best = h_of_M(x, 0.0, M11, G @ p.A @ x, P, p)
    for _ in range(20):
        assert h_of_M(x, 0.0, M11, rng.standard_normal(3), P, p) >= best


def test_lmi_structure():
    p = fig1_problem()
    P = np.eye(1)
    M11, M22 = np.array([[2.0]]), 0.5
    base = assemble_lmi([1.0], 0.0, [0.0], M11, M22, P, p)
    assert base.shape == (5, 5)
    assert np.array_equal(base, base.T)
    assert np.array_equal(base, phi_matrix([1.0], 0.0, diag_multiplier(M11, M22), P, p))
    u = 0.7
    moved = assemble_lmi([1.0], 0.0, [u], M11, M22, P, p)
    diff = moved - base
    expected = np.zeros((5, 5))
    expected[4, 1] = expected[1, 4] = u
    assert np.array_equal(diff, expected)
    with pytest.raises(DimensionMismatch):
        assemble_lmi([1.0], 0.0, [0.0, 1.0], M11, M22, P, p)


def test_lmi_structure_matrix_case():
    rng = np.random.default_rng(3)
    p = random_problem(rng, n=3, m=2, N=1)
    P = random_spd(rng, 3)
    args = (rng.standard_normal(3), 0.4)
    base = assemble_lmi(*args, np.zeros(2), P + np.eye(3), 1.0, P, p)
    u = rng.standard_normal(2)
    diff = assemble_lmi(*args, u, P + np.eye(3), 1.0, P, p) - base
    assert base.shape == (3 * 3 + 2 + 1,) * 2
    assert np.array_equal(diff[10:, 3], u) and np.array_equal(diff[3, 10:], u)
    diff[10:, 3] = 0
    diff[3, 10:] = 0
    assert not diff.any()


def _pd_margin(M):
    return np.linalg.eigvalsh(la.sym(M))[0]


def test_nullspace_equivalences():
    rng = np.random.default_rng(4)
    checked = 0
    while checked < 400:
        p = random_problem(rng, n=int(rng.integers(1, 4)), m=int(rng.integers(1, 3)), N=1)
        n, m = p.n, p.m
        P = random_spd(rng, n)
        x, s = rng.standard_normal(n), float(rng.normal(0, 2))
        # multipliers on both sides of each boundary
        D = la.sym(rng.standard_normal((n + 1, n + 1)))
        M = H_xs(x, s, P, p) + D
        M[:n, :n] = P + la.sym(rng.standard_normal((n, n)))
        left = [_pd_margin(M[:n, :n] - P), _pd_margin(M - H_xs(x, s, P, p))]
        if min(abs(v) for v in left) < 1e-6:
            continue
        Phi = phi_matrix(x, s, M, P, p)
        ProjP, ProjQ = nullspace_projections(Phi, n, m)
        right = [_pd_margin(ProjP), _pd_margin(ProjQ)]
        assert (left[0] > 0) == (right[0] > 0)
        assert (left[1] > 0) == (right[1] > 0)
        checked += 1


def test_synthesis_hand_example():
    p = fig1_problem()
    sch = acvar_recursion(p, 1.0)
    assert sch.S[3, 0, 0] == pytest.approx(2.0, rel=1e-15)
    u, cert = synthesize_acvar_control([1.0], 0.0, 3, sch, p)
    assert u[0] == pytest.approx(-2 / 3, rel=1e-14)
    assert cert.passed and cert.M22 > 0
    u10, cert10 = synthesize_acvar_control([1.0], 10.0, 3, sch, p)
    assert np.array_equal(u, u10) and cert10.passed
    assert cert10.M22 == pytest.approx(1e-7 * abs(1 / 1.5 + 1e-3 - 10), rel=1e-12)


def test_synthesis_at_origin():
    p = fig1_problem()
    sch = acvar_recursion(p, 0.3)
    for t in range(4):
        for s in (0.0, 1.0, 50.0):
            u, cert = synthesize_acvar_control([0.0], s, t, sch, p)
            assert u[0] == 0.0 and cert.passed


def test_synthesis_rejects_bad_time():
    sch = acvar_recursion(fig1_problem(), 1.0)
    with pytest.raises(IndexError):
        synthesize_acvar_control([0.0], 0.0, 4, sch, fig1_problem())


def test_certificates_random_problems():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = random_problem(rng, N=int(rng.integers(1, 6)))
        sch = acvar_recursion(p, np.diag(rng.uniform(0.05, 10, p.n)))
        for _ in range(25):
            t = int(rng.integers(0, p.N))
            x = rng.standard_normal(p.n) * 10 ** rng.uniform(-2, 2)
            s = float(x @ sch.P[t] @ x * rng.uniform(-2, 2))
            u1, c1 = synthesize_acvar_control(x, s, t, sch, p)
            u2, _ = synthesize_acvar_control(x, s + 17.0, t, sch, p)
            assert c1.passed
            assert np.array_equal(u1, u2)


def test_certificate_record_is_json():
    sch = acvar_recursion(fig1_problem(), 1.0)
    _, cert = synthesize_acvar_control([0.5], 0.1, 0, sch, fig1_problem())
    rec = json.loads(json.dumps(cert.to_record()))
    assert set(rec) == {"t", "x", "s", "u", "min_eig", "passed"} and rec["passed"] is True


def test_initial_budget_and_upper_bound():
    p = fig1_problem()
    sch = acvar_recursion(p, 1.0)
    P0, a0 = sch.P[0, 0, 0], sch.a[0]
    assert initial_budget([0.0], sch) == 0.0
    assert initial_budget([1.0], sch) == P0
    assert initial_budget([2.0], sch) == pytest.approx(4 * P0, rel=1e-15)
    assert upper_bound_J([1.0], 1.0, sch) == pytest.approx(P0 + a0)
    assert upper_bound_J([0.0], 0.25, sch) == pytest.approx(4 * a0)
    assert upper_bound_J([1.0], 0.05, sch) == pytest.approx(P0 + 20 * a0)
    vals = [upper_bound_J([1.0], a, sch) for a in np.linspace(0.01, 1, 30)]
    assert all(x >= y for x, y in zip(vals, vals[1:])) and vals[-1] == pytest.approx(P0 + a0)
    with pytest.raises(BadAlpha):
        upper_bound_J([1.0], 0.0, sch)


def test_upper_bound_J_is_the_minimum_over_s():
    sch = acvar_recursion(fig1_problem(), 0.5)
    P0, a0 = sch.P[0, 0, 0], sch.a[0]
    for alpha in (0.05, 0.3, 1.0):
        s = np.linspace(-5, 5, 20001)
        brute = np.min(s + (a0 + np.maximum(P0 - s, 0)) / alpha)
        assert upper_bound_J([1.0], alpha, sch) == pytest.approx(brute, abs=1e-3)


def test_rollout_step_examples():
    p = fig1_problem()
    x, s, u, c = rollout_step(ZeroPolicy(1), [1.0], 0.0, 0, [0.5], p)
    assert (x[0], s, u[0], c) == (1.5, -1e-3, 0.0, 1e-3)
    x, s, u, c = rollout_step(ZeroPolicy(1), [0.0], 0.0, 0, [0.0], p)
    assert (x[0], s, u[0], c) == (0.0, 0.0, 0.0, 0.0)
    x, s, u, c = rollout_step(LinearFeedback(-np.ones((4, 1, 1))), [1.0], 0.0, 0, [0.0], p)
    assert x[0] == 0.0 and u[0] == -1.0 and c == pytest.approx(1.001) and s == pytest.approx(-1.001)


def test_rollout_batch_matches_step():
    rng = np.random.default_rng(6)
    p = random_problem(rng, n=3, m=2, N=3)
    pol = LinearFeedback(rng.standard_normal((3, 2, 3)))
    X, S, W = rng.standard_normal((5, 3)), rng.standard_normal(5), rng.standard_normal((5, 3))
    Xn, Sn, U, C = rollout_batch(pol, X, S, 1, W, p)
    for k in range(5):
        x, s, u, c = rollout_step(pol, X[k], S[k], 1, W[k], p)
        assert np.allclose(Xn[k], x, rtol=1e-14) and Sn[k] == pytest.approx(s, rel=1e-14)
        assert np.allclose(U[k], u) and C[k] == pytest.approx(c, rel=1e-14)


def test_acvar_certified_records_certificates():
    p = fig1_problem()
    sch = acvar_recursion(p, 1.0)
    pol = AcvarCertified(sch, p)
    x, s = np.array([1.0]), initial_budget([1.0], sch)
    for t in range(p.N):
        x, s, _, _ = rollout_step(pol, x, s, t, [0.3], p)
    assert len(pol.certificates) == 4 and all(c.passed for c in pol.certificates)
    quiet = AcvarCertified(sch, p, certify=False)
    quiet.control([1.0], 0.0, 0)
    assert quiet.certificates == []


def test_grid_policy_nearest_node():
    tables = np.arange(12, dtype=float).reshape(1, 3, 4)
    pol = GridPolicy([-1.0, 0.0, 1.0], [0.0, 1.0, 2.0, 3.0], tables)
    assert pol.control([0.2], 1.6, 0)[0] == tables[0, 1, 2]
    assert pol.control([-9.0], 99.0, 0)[0] == tables[0, 0, 3]
    assert pol.control([0.5], 0.5, 0)[0] == tables[0, 1, 0]  # ties go to the lower node
    with pytest.raises(ValueError):
        GridPolicy([0.0, 1.0], [0.0, 1.0], np.full((1, 2, 2), np.nan))
    with pytest.raises(DimensionMismatch):
        GridPolicy([0.0, 1.0], [0.0, 1.0], np.zeros((1, 3, 2)))


def test_linear_feedback_validation():
    with pytest.raises(DimensionMismatch):
        LinearFeedback(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        LinearFeedback(np.full((1, 1, 1), np.inf))
