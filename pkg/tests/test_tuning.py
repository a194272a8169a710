import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfunctional.moments import sample_moments
from mvfunctional.simulation import generate_gaussian, make_setting, rep_seed
from mvfunctional.solver import QuadProblem, SolverConfig, solve_l1
from mvfunctional.tuning import (
    CvConfig,
    OracleContext,
    cv_tune,
    default_lambda_grid,
    fold_indices,
    oracle_sweep,
    oracle_tune,
    resolve_grid,
    theory_lambda_gamma,
)


def test_theory_examples():
    tt = theory_lambda_gamma(OracleContext(tau=0.0), n=100, p=10, t=2.0)
    assert tt.lam == pytest.approx(2.0 * math.sqrt(math.log(10) / 100), rel=1e-15)
    assert tt.gamma == 0.0 and tt.degenerate
    tt = theory_lambda_gamma(OracleContext(tau=3.0, c_L=1.0), n=100, p=10)
    assert tt.gamma == pytest.approx(2 * math.sqrt(3), rel=1e-15)
    assert not tt.degenerate
    plain = theory_lambda_gamma(OracleContext(tau=2.0), n=50, p=20)
    capped = theory_lambda_gamma(OracleContext(tau=2.0, q=1.0, R=1e9), n=50, p=20)
    assert capped.lam == plain.lam and capped.gamma == plain.gamma
    assert capped.tau_eff == 2.0


def test_theory_cap_active():
    # c_U R^(2/q) = 0.25 < tau
    tt = theory_lambda_gamma(OracleContext(tau=4.0, q=1.0, R=0.5), n=100, p=10)
    assert tt.tau_eff == pytest.approx(0.25)
    assert tt.gamma == pytest.approx(2 * math.sqrt(0.25))
    assert tt.R_eff == pytest.approx(min(10 ** 0.5 * 4.0 ** 0.5, 0.5))


def test_theory_validation():
    with pytest.raises(ValueError):
        OracleContext(tau=-1.0)
    with pytest.raises(ValueError):
        OracleContext(tau=1.0, c_L=2.0, c_U=1.0)
    with pytest.raises(ValueError):
        theory_lambda_gamma(OracleContext(tau=1.0), n=1, p=10)
    with pytest.raises(ValueError):
        theory_lambda_gamma(OracleContext(tau=1.0), n=10, p=10, t=0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(1.01, 3),
       st.integers(2, 10_000), st.integers(2, 10_000))
def test_theory_monotone(tau, t, nu, factor, n, p):
    base = theory_lambda_gamma(OracleContext(tau=tau, nu=nu), n, p, t).lam
    assert theory_lambda_gamma(OracleContext(tau=tau, nu=nu), n, p, t * factor).lam > base
    assert theory_lambda_gamma(OracleContext(tau=tau, nu=nu * factor), n, p, t).lam > base
    assert theory_lambda_gamma(OracleContext(tau=tau * factor + 0.01, nu=nu), n, p, t).lam > base


def test_cv_config_validation():
    with pytest.raises(ValueError):
        CvConfig(folds=1)
    with pytest.raises(ValueError):
        CvConfig(lambda_grid=(0.1, -1.0))


def test_fold_indices_partition():
    folds = fold_indices(23, 5, seed=3)
    assert sorted(np.concatenate(folds).tolist()) == list(range(23))
    assert [len(f) for f in folds] == [5, 5, 5, 4, 4]
    assert all(np.array_equal(a, b) for a, b in zip(folds, fold_indices(23, 5, seed=3)))


def _data(seed, n=120, p=8):
    return generate_gaussian(n, p, 2, 1.0, 2.0, seed)


def test_cv_single_point_and_too_few_rows():
    d = _data(1)
    res = cv_tune(d.data, CvConfig(lambda_grid=(0.05,), gamma_grid=(2.0,)))
    assert (res.lam, res.gamma) == (0.05, 2.0)
    assert len(res.table) == 1 and np.isfinite(res.table[0]["mean_loss"])
    with pytest.raises(ValueError):
        cv_tune(d.data[:9], CvConfig(folds=5))


def test_cv_loss_matches_direct_computation():
    d = _data(2)
    cfg = CvConfig(folds=3, lambda_grid=(0.1,), gamma_grid=(1.5,), seed=4)
    res = cv_tune(d.data, cfg)
    losses = []
    for idx in fold_indices(len(d.data), 3, 4):
        mask = np.ones(len(d.data), bool)
        mask[idx] = False
        a = solve_l1(QuadProblem.from_moments(sample_moments(d.data[mask])), SolverConfig(0.1, 1.5)).alpha
        held = d.data[idx]
        mu = held.mean(axis=0)
        c = (held - mu).T @ (held - mu) / len(held)
        losses.append(0.5 * a @ c @ a - mu @ a)
    assert res.table[0]["mean_loss"] == pytest.approx(np.mean(losses), abs=1e-10)


def test_cv_duplicate_points_tie_to_larger_lambda():
    d = _data(3)
    res = cv_tune(d.data, CvConfig(lambda_grid=(0.02, 0.02, 0.3), gamma_grid=(2.0,)))
    dup = [r["mean_loss"] for r in res.table if r["lambda"] == 0.02]
    assert dup[0] == dup[1]
    # huge lambdas all zero the fit and tie at loss 0; the largest wins
    big = float(np.abs(sample_moments(d.data).mean).max()) * 10
    res = cv_tune(-d.data, CvConfig(lambda_grid=(big, 2 * big), gamma_grid=(2.0,)))
    assert res.lam == 2 * big


def test_cv_tables_bit_identical():
    d = _data(4)
    cfg = CvConfig(seed=11, n_lambda=8)
    a, b = cv_tune(d.data, cfg), cv_tune(d.data, cfg)
    assert a.table == b.table and (a.lam, a.gamma) == (b.lam, b.gamma)


def test_cv_table_csv(tmp_path):
    d = _data(5)
    res = cv_tune(d.data, CvConfig(n_lambda=3, gamma_grid=(1.0,)))
    res.write_csv(tmp_path / "cv.csv")
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "lambda,gamma,mean_loss,n_skipped"
    assert len(lines) == 4


def test_resolve_grid_default_shape():
    d = _data(6)
    pts = resolve_grid(d.data, CvConfig(n_lambda=7))
    assert len(pts) == 7 * 4
    lams = [l for l, g in pts if g == pts[0][1]]
    assert lams == sorted(lams, reverse=True)
    m = sample_moments(d.data)
    assert max(lams) == pytest.approx(np.abs(m.mean).max())
    assert np.allclose(default_lambda_grid(np.zeros(3), 2), [1e-3, 1.0])


def test_oracle_truth_zero_exact():
    d = generate_gaussian(100, 6, 0, 0.0, 1.0, seed=9)
    big = float(np.abs(d.data.mean(axis=0)).max()) + 1.0
    lam, gam = oracle_tune(d.data, np.zeros(6), CvConfig(lambda_grid=(0.001, big), gamma_grid=(1.0,)))
    assert lam == big
    errors, _ = oracle_sweep(QuadProblem.from_moments(sample_moments(d.data)), np.zeros(6), [(big, 1.0)])
    assert errors == [0.0]


def test_oracle_grid_of_one():
    d = _data(7)
    assert oracle_tune(d.data, d.alpha, CvConfig(lambda_grid=(0.07,), gamma_grid=(3.0,))) == (0.07, 3.0)


@pytest.mark.parametrize("seed", range(5))
def test_oracle_is_argmin_by_resweep(seed):
    d = _data(100 + seed, n=200, p=12)
    cfg = CvConfig(n_lambda=12)
    lam, gam = oracle_tune(d.data, d.alpha, cfg)
    prob = QuadProblem.from_moments(sample_moments(d.data))
    best = np.linalg.norm(solve_l1(prob, SolverConfig(lam, gam)).alpha - d.alpha)
    # cold-start re-sweep, independent of the warm-started path
    for l, g in resolve_grid(d.data, cfg):
        err = np.linalg.norm(solve_l1(prob, SolverConfig(l, g)).alpha - d.alpha)
        assert best <= err + 1e-6


def test_cv_close_to_oracle_on_setting_one():
    # single gamma from the theory rule; the lambda grid is shared
    sc = make_setting("s1")
    n = 8192
    p, s, xi = sc.dims(n)
    gamma = theory_lambda_gamma(OracleContext(tau=s * xi**2 / sc.eta, c_L=sc.eta, c_U=sc.eta), n, p).gamma
    good = 0
    for rep in range(100):
        d = generate_gaussian(n, p, s, xi, sc.eta, rep_seed(7, rep, n))
        cfg = CvConfig(gamma_grid=(gamma,), seed=rep)
        cv = cv_tune(d.data, cfg)
        prob = QuadProblem.from_moments(sample_moments(d.data))
        errors, _ = oracle_sweep(prob, d.alpha, resolve_grid(d.data, cfg))
        e_cv = np.sum((solve_l1(prob, SolverConfig(cv.lam, cv.gamma)).alpha - d.alpha) ** 2)
        good += e_cv <= 2 * min(errors) ** 2
    assert good >= 90
