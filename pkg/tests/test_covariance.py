import numpy as np
import pytest
from hypothesis import given, strategies as st

from portqp.covariance import (CovarianceEstimate, estimate_factor_betas, linear_shrinkage,
                               qis_shrinkage, repair_singular, sample_cov)
from portqp.errors import DataError, EstimationError, SingularMatrixError

from helpers import random_pd

HAND = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])


@pytest.mark.parametrize("c", [1.0, 4.0, 0.1])
def test_sample_cov_hand_panel(c):
    # column means are zero; outer products sum to [[2, 1], [1, 2]]
    S = sample_cov(HAND / c).matrix
    np.testing.assert_allclose(S, np.array([[2.0, 1.0], [1.0, 2.0]]) / 3 / c ** 2, atol=1e-15)


def test_sample_cov_duplicate_columns(rng):
    x = rng.standard_normal(40)
    S = sample_cov(np.column_stack([x, x, rng.standard_normal(40)])).matrix
    np.testing.assert_array_equal(S[0], S[1])
    assert np.linalg.matrix_rank(S[:2, :2]) == 1


def test_sample_cov_errors():
    with pytest.raises(EstimationError):
        sample_cov(np.ones((1, 3)))
    with pytest.raises(DataError):
        sample_cov(np.array([[1.0, np.nan], [0.0, 1.0], [2.0, 2.0]]))


def test_linear_shrinkage_single_asset(rng):
    x = rng.standard_normal((30, 1))
    est = linear_shrinkage(x)
    assert est.matrix[0, 0] == pytest.approx(x.var(), rel=1e-14)


def test_linear_shrinkage_target_already_reached():
    # S = I exactly, so gamma = 0 and delta defaults to 1
    X = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    est = linear_shrinkage(X)
    assert est.diagnostics["gamma_zero"]
    assert est.diagnostics["delta"] == 1.0
    np.testing.assert_array_equal(est.matrix, np.eye(2))


def test_linear_shrinkage_diagnostics_exposed(rng):
    d = linear_shrinkage(rng.standard_normal((40, 6))).diagnostics
    for key in ("delta", "kappa", "pi", "rho", "gamma"):
        assert np.isfinite(d[key])


@given(seed=st.integers(0, 2**32 - 1), T=st.integers(2, 80), N=st.integers(1, 30))
def test_delta_in_unit_interval(seed, T, N):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((T, N)) * rng.uniform(0.01, 1.0, N)
    est = linear_shrinkage(X)
    assert 0.0 <= est.diagnostics["delta"] <= 1.0
    np.testing.assert_allclose(est.matrix, est.matrix.T, atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1))
def test_linear_shrinkage_clamp_endpoints(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((25, 4))
    est = linear_shrinkage(X)
    S = sample_cov(X).matrix
    F = np.trace(S) / 4 * np.eye(4)
    d = est.diagnostics["delta"]
    if d == 0.0:
        np.testing.assert_array_equal(est.matrix, S)
    elif d == 1.0:
        np.testing.assert_array_equal(est.matrix, F)
    else:
        np.testing.assert_allclose(est.matrix, d * F + (1 - d) * S, atol=1e-15)


def test_linear_shrinkage_clamped_at_zero_returns_sample():
    # strongly heterogeneous variances over a long panel: kappa/T is tiny or negative
    rng = np.random.default_rng(7)
    X = rng.standard_normal((5000, 3)) * np.array([1.0, 10.0, 100.0])
    est = linear_shrinkage(X)
    if est.diagnostics["delta"] == 0.0:
        np.testing.assert_array_equal(est.matrix, sample_cov(X).matrix)
    else:
        assert est.diagnostics["delta"] < 0.01


def test_linear_shrinkage_monte_carlo_risk():
    rng = np.random.default_rng(2023)
    N, T = 50, 60
    err_s, err_ls = [], []
    for _ in range(200):
        X = rng.standard_normal((T, N))
        err_s.append(np.linalg.norm(sample_cov(X).matrix - np.eye(N)))
        err_ls.append(np.linalg.norm(linear_shrinkage(X).matrix - np.eye(N)))
    assert np.mean(err_ls) < np.mean(err_s)


@given(seed=st.integers(0, 2**32 - 1))
def test_condition_number_not_worse_than_repaired_sample(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((20, 30)) @ np.linalg.cholesky(random_pd(rng, 30)).T
    est = linear_shrinkage(X)
    if est.diagnostics["delta"] > 0:
        rep = repair_singular(sample_cov(X))
        assert np.linalg.cond(est.matrix) <= np.linalg.cond(rep.matrix) * (1 + 1e-9)


@given(seed=st.integers(0, 2**32 - 1), T=st.integers(5, 120), N=st.integers(2, 40))
def test_qis_keeps_sample_eigenbasis(seed, T, N):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((T, N)) @ np.linalg.cholesky(random_pd(rng, N)).T
    est = qis_shrinkage(X)
    M = est.matrix
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / (T - 1)
    comm = np.linalg.norm(M @ S - S @ M)
    assert comm <= 1e-6 * np.linalg.norm(S) * np.linalg.norm(M)
    lam = np.linalg.eigvalsh(M)
    assert lam[0] >= -1e-10 * lam[-1]


def test_qis_eigenvectors_match_sample(rng):
    X = rng.standard_normal((200, 8)) @ np.linalg.cholesky(random_pd(rng, 8, cond=50)).T
    est = qis_shrinkage(X)
    _, U = np.linalg.eigh(sample_cov(X).matrix)
    D = U.T @ est.matrix @ U
    np.testing.assert_allclose(D - np.diag(np.diag(D)), 0.0, atol=1e-8 * np.abs(D).max())
    np.testing.assert_allclose(np.sort(np.diag(D)), np.sort(est.diagnostics["shrunk_eigenvalues"]),
                               rtol=1e-10)


def test_qis_vanishing_concentration():
    rng = np.random.default_rng(99)
    X = rng.standard_normal((5000, 5))
    est = qis_shrinkage(X)
    lam = est.diagnostics["sample_eigenvalues"]
    d = est.diagnostics["shrunk_eigenvalues"]
    assert np.max(np.abs(d - lam)) < 0.05


@pytest.mark.parametrize("method", ["analytical", "quadratic_inverse"])
def test_qis_beats_sample_against_identity(method):
    rng = np.random.default_rng(5)
    err_s, err_q = [], []
    for _ in range(20):
        X = rng.standard_normal((100, 50))
        err_s.append(np.linalg.norm(sample_cov(X).matrix - np.eye(50)))
        err_q.append(np.linalg.norm(qis_shrinkage(X, method=method).matrix - np.eye(50)))
    assert np.mean(err_q) < np.mean(err_s)


@pytest.mark.parametrize("shape", [(5, 5), (3, 10), (12, 13)])
def test_qis_tiny_samples_are_finite(shape):
    X = np.random.default_rng(0).standard_normal(shape)
    lam = np.linalg.eigvalsh(qis_shrinkage(X).matrix)
    assert np.all(np.isfinite(lam)) and lam[0] >= -1e-10 * lam[-1]


def test_qis_more_assets_than_periods(rng):
    X = rng.standard_normal((30, 60))
    est = qis_shrinkage(X)
    lam = np.linalg.eigvalsh(est.matrix)
    assert lam[0] > 0  # the null space receives a positive value


def test_qis_errors():
    with pytest.raises(EstimationError):
        qis_shrinkage(np.ones((1, 3)))
    with pytest.raises(EstimationError):
        qis_shrinkage(np.zeros((10, 3)))
    with pytest.raises(ValueError):
        qis_shrinkage(np.random.default_rng(0).standard_normal((10, 3)), method="bogus")


@pytest.mark.parametrize("fn", [sample_cov, linear_shrinkage, qis_shrinkage])
def test_permutation_consistency(fn, rng):
    X = rng.standard_normal((40, 7)) @ np.linalg.cholesky(random_pd(rng, 7)).T
    perm = rng.permutation(7)
    a = fn(X).matrix
    b = fn(X[:, perm]).matrix
    np.testing.assert_allclose(b, a[np.ix_(perm, perm)], atol=1e-12 * np.abs(a).max())


def test_repair_full_rank_unchanged(rng):
    S = random_pd(rng, 6)
    out = repair_singular(CovarianceEstimate(S, "Sample"))
    np.testing.assert_allclose(out.matrix, S, atol=1e-12)
    assert out.diagnostics["repaired_eigenvalues"] == 0


def test_repair_rank_one(rng):
    v = rng.standard_normal(5)
    out = repair_singular(CovarianceEstimate(np.outer(v, v), "Sample"), 1e-8)
    lam = np.linalg.eigvalsh(out.matrix)
    top = v @ v
    np.testing.assert_allclose(lam[:4], 1e-8 * top, rtol=1e-6)
    assert lam[-1] == pytest.approx(top, rel=1e-12)


def test_repair_round_off_negative(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    M = (Q * np.array([-1e-17, 0.5, 1.0, 2.0])) @ Q.T
    lam = np.linalg.eigvalsh(repair_singular(CovarianceEstimate(M, "Sample")).matrix)
    assert lam[0] == pytest.approx(2e-8, rel=1e-6)


def test_repair_errors():
    with pytest.raises(SingularMatrixError):
        repair_singular(CovarianceEstimate(np.zeros((3, 3)), "Sample"))
    with pytest.raises(ValueError):
        repair_singular(CovarianceEstimate(np.eye(2), "Sample"), 0.0)


def test_betas_exact_linear_model(rng):
    T, N, K = 50, 6, 3
    F = rng.standard_normal((T, K))
    alpha = rng.normal(size=N)
    beta = rng.normal(size=(N, K))
    R = alpha + F @ beta.T
    a, b, e = estimate_factor_betas(R, F)
    np.testing.assert_allclose(a, alpha, atol=1e-10)
    np.testing.assert_allclose(b, beta, atol=1e-10)
    np.testing.assert_allclose(e, 0.0, atol=1e-10)


def test_betas_hand_regression():
    # xbar = 2.5, ybar = 4, Sxy = 7, Sxx = 5 -> slope 1.4, intercept 0.5
    f = np.array([1.0, 2.0, 3.0, 4.0])
    r = np.array([2.0, 3.0, 5.0, 6.0])
    a, b, e = estimate_factor_betas(r[:, None], f)
    assert a[0] == pytest.approx(0.5, abs=1e-12)
    assert b[0, 0] == pytest.approx(1.4, abs=1e-12)


def test_betas_residuals_orthogonal(rng):
    F = rng.standard_normal((60, 2))
    R = rng.standard_normal((60, 4))
    _, _, e = estimate_factor_betas(R, F)
    Xd = np.column_stack((np.ones(60), F))
    np.testing.assert_allclose(Xd.T @ e, 0.0, atol=1e-8)


def test_betas_errors(rng):
    F = np.column_stack((rng.standard_normal(20), np.zeros(20)))
    with pytest.raises(SingularMatrixError):
        estimate_factor_betas(rng.standard_normal((20, 2)), F)
    with pytest.raises(EstimationError):
        estimate_factor_betas(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))


def test_csv_round_trip(tmp_path, rng):
    est = linear_shrinkage(rng.standard_normal((30, 4)))
    est.to_csv(tmp_path / "c.csv", ["a", "b", "c", "d"], tmp_path / "c.json")
    back, ids = CovarianceEstimate.from_csv(tmp_path / "c.csv", tmp_path / "c.json")
    assert ids == ["a", "b", "c", "d"]
    assert back.estimator == "LinearShrinkage"
    np.testing.assert_array_equal(back.matrix, est.matrix)
    assert back.diagnostics["delta"] == est.diagnostics["delta"]
