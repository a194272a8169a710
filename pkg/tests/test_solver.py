import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance
from mvfunctional.solver import (
    L0_MAX_P,
    QuadProblem,
    SolverConfig,
    SolverError,
    kkt_residual,
    mcp_objective,
    project_l1_ball,
    prox_l1_ball,
    soft_threshold,
    solve_dantzig,
    solve_l0_exhaustive,
    solve_l1,
    solve_mcp,
)
from oracles import dantzig_vertices, ista, kkt_interior, l0_enumerate, l1_obj, prox_grid

seeds = st.integers(0, 2**32 - 1)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(-1.0, 1.0)
    with pytest.raises(ValueError):
        SolverConfig(0.1, 0.0)
    with pytest.raises(ValueError):
        SolverConfig(0.1, 1.0, tol=0)
    with pytest.raises(ValueError):
        QuadProblem(np.eye(2), [np.nan, 0])
    with pytest.raises(ValueError):
        QuadProblem([[1.0, 2.0], [0.0, 1.0]], [0, 0])


def test_prox_examples(rng):
    v = np.array([0.5, -0.2, 0.05])
    assert np.array_equal(prox_l1_ball(v, 0.1, 10.0), soft_threshold(v, 0.1))
    assert np.allclose(prox_l1_ball([10.0, 0.0], 1.0, 1.0), [1.0, 0.0], atol=0)
    for _ in range(200):
        v = rng.standard_normal(rng.integers(1, 8)) * 3
        lam, gam = rng.uniform(0, 2), rng.uniform(0.05, 4)
        assert np.allclose(prox_l1_ball(v, lam, gam), prox_grid(v, lam, gam), atol=1e-8, rtol=0)


def test_l1_zero_when_mean_small(rng):
    cov, mean = random_instance(rng, 5)
    lam = np.abs(mean).max()
    sol = solve_l1(QuadProblem(cov, mean), SolverConfig(lam, 1.0))
    assert np.array_equal(sol.alpha, np.zeros(5)) and sol.converged


def test_l1_identity_closed_form(rng):
    mean = rng.standard_normal(7)
    sol = solve_l1(QuadProblem(np.eye(7), mean), SolverConfig(0.3, 1e6))
    assert np.allclose(sol.alpha, soft_threshold(mean, 0.3), atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_l1_matches_long_run_oracle(seed):
    rng = np.random.default_rng(seed)
    cov, mean = random_instance(rng, 6)
    lam, gam = 0.1, rng.uniform(0.3, 3.0)
    sol = solve_l1(QuadProblem(cov, mean), SolverConfig(lam, gam))
    ref = ista(cov, mean, lam, gam)
    assert sol.objective <= l1_obj(cov, mean, lam, ref) + 1e-8
    assert abs(sol.objective - l1_obj(cov, mean, lam, ref)) <= 1e-8


@settings(max_examples=80, deadline=None)
@given(seeds, st.integers(1, 30), st.booleans())
def test_l1_kkt_certificate(seed, p, low_rank):
    rng = np.random.default_rng(seed)
    cov, mean = random_instance(rng, p, rank=max(1, p // 3) if low_rank else None)
    lam = rng.uniform(0.0, 1.0) * np.abs(mean).max()
    gam = rng.uniform(0.05, 5.0)
    sol = solve_l1(QuadProblem(cov, mean), SolverConfig(lam, gam))
    assert sol.converged
    assert np.linalg.norm(sol.alpha) <= gam * (1 + 1e-10)
    if not sol.ball_active:
        assert kkt_interior(cov, mean, lam, sol.alpha) <= 1e-8
    res, _ = kkt_residual(QuadProblem(cov, mean), sol.alpha, lam, gam)
    assert res == sol.kkt_residual <= 1e-8


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_l1_history_monotone(seed):
    rng = np.random.default_rng(seed)
    cov, mean = random_instance(rng, 12)
    sol = solve_l1(QuadProblem(cov, mean), SolverConfig(0.05, 2.0))
    h = np.array(sol.history)
    assert np.all(np.diff(h) <= 0)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.01, 100))
def test_l1_joint_scaling(seed, c):
    rng = np.random.default_rng(seed)
    cov, mean = random_instance(rng, 8)
    lam, gam = 0.2 * np.abs(mean).max(), 1.5
    a = solve_l1(QuadProblem(cov, mean), SolverConfig(lam, gam))
    b = solve_l1(QuadProblem(c * cov, c * mean), SolverConfig(c * lam, gam))
    assert np.allclose(a.alpha, b.alpha, atol=1e-6, rtol=0)
    assert b.objective == pytest.approx(c * a.objective, rel=1e-6, abs=1e-9 * max(1.0, c))


def test_l1_reports_nonconvergence(rng):
    cov, mean = random_instance(rng, 20)
    sol = solve_l1(QuadProblem(cov, mean), SolverConfig(1e-4, 10.0, max_iter=3, tol=1e-14))
    assert not sol.converged
    assert sol.iterations == 3


def test_l1_indefinite_cov_stays_in_ball(rng):
    a = rng.standard_normal((6, 6))
    cov = (a + a.T) / 2
    sol = solve_l1(QuadProblem(cov, rng.standard_normal(6)), SolverConfig(0.1, 1.0))
    assert np.linalg.norm(sol.alpha) <= 1.0 * (1 + 1e-10)


def test_mcp_zero_and_unshrunk():
    prob = QuadProblem(np.eye(3), [0.2, -0.1, 0.05])
    sol = solve_mcp(prob, SolverConfig(0.3, 10.0, mcp_concavity=3.0))
    assert np.array_equal(sol.alpha, np.zeros(3))
    prob = QuadProblem(np.eye(3), [5.0, 0.1, 0.0])
    sol = solve_mcp(prob, SolverConfig(0.5, 100.0, mcp_concavity=3.0))
    assert sol.converged
    assert np.allclose(sol.alpha, [5.0, 0.0, 0.0], atol=1e-8, rtol=0)


def test_mcp_needs_concavity():
    with pytest.raises(ValueError):
        solve_mcp(QuadProblem(np.eye(2), [1.0, 0.0]), SolverConfig(0.1, 1.0))


@pytest.mark.parametrize("seed", range(10))
def test_mcp_improves_on_l1_start(seed):
    rng = np.random.default_rng(seed)
    cov, mean = random_instance(rng, 5)
    lam, b, gam = 0.2, 2.5, 5.0
    l1 = solve_l1(QuadProblem(cov, mean), SolverConfig(lam, gam))
    x0 = project_l1_ball(l1.alpha, gam)
    sol = solve_mcp(QuadProblem(cov, mean), SolverConfig(lam, gam, mcp_concavity=b), x0=x0)
    assert sol.converged
    assert sol.objective <= mcp_objective(QuadProblem(cov, mean), x0, lam, b) + 1e-12
    assert np.abs(sol.alpha).sum() <= gam * (1 + 1e-10)


def test_project_l1_ball(rng):
    for _ in range(50):
        v = rng.standard_normal(6) * 3
        r = rng.uniform(0.1, 3)
        x = project_l1_ball(v, r)
        assert np.abs(x).sum() <= r + 1e-12
        # optimality: no feasible random point is closer
        for _ in range(20):
            z = project_l1_ball(rng.standard_normal(6), r)
            assert np.linalg.norm(x - v) <= np.linalg.norm(z - v) + 1e-12


def test_dantzig_examples(rng):
    mean = np.array([0.3, -0.2])
    assert np.array_equal(solve_dantzig(QuadProblem(np.eye(2), mean), 0.5).alpha, np.zeros(2))
    mean = np.array([2.0, -1.5, 0.9])
    sol = solve_dantzig(QuadProblem(np.eye(3), mean), 0.5)
    assert np.allclose(sol.alpha, soft_threshold(mean, 0.5), atol=1e-8, rtol=0)
    with pytest.raises(SolverError):
        solve_dantzig(QuadProblem(np.zeros((2, 2)), [1.0, 0.0]), 0.1)


@pytest.mark.parametrize("seed", range(6))
def test_dantzig_vertex_oracle(seed):
    rng = np.random.default_rng(seed)
    cov, mean = random_instance(rng, 4)
    lam = 0.3 * np.abs(mean).max()
    sol = solve_dantzig(QuadProblem(cov, mean), lam)
    assert sol.objective == pytest.approx(dantzig_vertices(cov, mean, lam), abs=1e-8)
    assert np.abs(cov @ sol.alpha - mean).max() <= lam + 1e-9
    assert sol.kkt_residual <= 1e-8


def test_l0_examples(rng):
    cov, mean = random_instance(rng, 6)
    assert np.array_equal(solve_l0_exhaustive(QuadProblem(cov, mean), 0, 1.0).alpha, np.zeros(6))
    mean = np.array([0.5, -2.0, 1.0])
    sol = solve_l0_exhaustive(QuadProblem(np.eye(3), mean), 1, 1e6)
    assert np.allclose(sol.alpha, [0.0, -2.0, 0.0], atol=1e-10)
    with pytest.raises(ValueError):
        solve_l0_exhaustive(QuadProblem(np.eye(L0_MAX_P + 1), np.ones(L0_MAX_P + 1)), 1, 1.0)


@pytest.mark.parametrize("seed", range(8))
def test_l0_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    cov, mean = random_instance(rng, 8)
    gam = rng.uniform(0.2, 3.0)
    sol = solve_l0_exhaustive(QuadProblem(cov, mean), 2, gam)
    x, obj, supp = l0_enumerate(cov, mean, 2, gam)
    assert tuple(sol.support) == supp
    assert sol.objective == pytest.approx(obj, abs=1e-10)


def test_l0_tie_breaks_lexicographically():
    # identical coordinates: every size-1 support ties
    sol = solve_l0_exhaustive(QuadProblem(np.eye(4), np.ones(4)), 1, 10.0)
    assert tuple(sol.support) == (0,)


def test_l0_singular_support_does_not_abort():
    cov = np.ones((3, 3))
    sol = solve_l0_exhaustive(QuadProblem(cov, [1.0, 1.0, 1.0]), 2, 1.0)
    assert np.isfinite(sol.objective)


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 3))
def test_l0_beats_restricted_l1(seed, s):
    rng = np.random.default_rng(seed)
    p = 7
    cov, mean = random_instance(rng, p)
    gam = rng.uniform(0.2, 3.0)
    best = solve_l0_exhaustive(QuadProblem(cov, mean), s, gam)
    for supp in itertools.islice(itertools.combinations(range(p), s), 5):
        idx = list(supp)
        sub = solve_l1(QuadProblem(cov[np.ix_(idx, idx)], mean[idx]), SolverConfig(0.0, gam))
        assert best.objective <= sub.objective + 1e-10
