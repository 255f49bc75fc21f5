import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from portqp import kernels
from portqp.data_io import CharacteristicsPanel, ReturnsPanel, gen_synthetic_panel, month_labels
from portqp.errors import DimensionError, EstimationError, PortQPError
from portqp.ipca import IPCAModel, _moments, fit_ipca, ipca_covariance, ipca_total_r2

from helpers import principal_angles


@pytest.fixture(scope="module")
def noiseless():
    panel, chars, truth = gen_synthetic_panel(30, 120, 6, 2, 0.0, 17)
    return panel, chars, truth, fit_ipca(panel, chars, 2)


def _panels(R, Z):
    T, N = R.shape
    dates = month_labels(T)
    assets = [f"A{i}" for i in range(N)]
    return (ReturnsPanel(dates, assets, R),
            CharacteristicsPanel(dates, assets, [f"c{j}" for j in range(Z.shape[2])], Z))


def test_noiseless_recovers_loading_span(noiseless):
    _, _, truth, model = noiseless
    assert np.max(principal_angles(model.Gamma, truth.Gamma0)) < 1e-6


def test_noiseless_total_r2_is_one(noiseless):
    panel, chars, _, model = noiseless
    assert ipca_total_r2(model, panel, chars) == pytest.approx(1.0, abs=1e-10)


def test_normalization(noiseless):
    model = noiseless[3]
    np.testing.assert_allclose(model.Gamma.T @ model.Gamma, np.eye(2), atol=1e-8)
    FF = model.factors @ model.factors.T
    assert abs(FF[0, 1]) <= 1e-8 * np.max(np.abs(FF))
    assert FF[0, 0] >= FF[1, 1]
    assert model.factors.shape == (2, 119)
    assert len(model.residual_variances) == 30


def test_rotated_initialization_same_span(noiseless):
    panel, chars, truth, model = noiseless
    rng = np.random.default_rng(4)
    start = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    other = fit_ipca(panel, chars, 2, gamma_init=start)
    assert np.max(principal_angles(other.Gamma, model.Gamma)) < 1e-6


@pytest.mark.filterwarnings("ignore:IPCA did not converge")
@settings(max_examples=15)
@given(seed=st.integers(0, 2**32 - 1), noise=st.sampled_from([0.0, 0.01, 0.05, 0.2]),
       K=st.integers(1, 3))
def test_half_sweep_objective_nonincreasing(seed, noise, K):
    panel, chars, _ = gen_synthetic_panel(20, 40, 4, min(K, 2), noise, seed)
    model = fit_ipca(panel, chars, K, max_sweeps=200)
    path = np.array(model.diagnostics["half_sweep_objectives"])
    slack = 1e-10 * model.diagnostics["initial_objective"]
    assert np.all(np.diff(path) <= slack)
    np.testing.assert_allclose(model.Gamma.T @ model.Gamma, np.eye(K), atol=1e-8)


def test_rank_bounds():
    panel, chars, _ = gen_synthetic_panel(10, 20, 3, 1, 0.01, 1)
    for K in (0, 4):
        with pytest.raises(PortQPError):
            fit_ipca(panel, chars, K)


def test_identity_characteristics_reduce_to_pca():
    # Z_t = I: the model is r_{t+1} = Gamma f_{t+1}, i.e. rank-K PCA of the
    # uncentered second moment of r_2..r_T
    rng = np.random.default_rng(8)
    T, N, K = 80, 6, 2
    R = rng.standard_normal((T, N)) * np.array([3.0, 2.0, 1.0, 0.5, 0.3, 0.2]) * 0.01
    Z = np.broadcast_to(np.eye(N), (T, N, N))
    panel, chars = _panels(R, Z)
    model = fit_ipca(panel, chars, K, tol=1e-14, max_sweeps=2000)
    ev, V = np.linalg.eigh(R[1:].T @ R[1:])
    top = V[:, np.argsort(ev)[::-1][:K]]
    assert np.max(principal_angles(model.Gamma, top)) < 1e-6
    full = fit_ipca(panel, chars, N)
    assert ipca_total_r2(full, panel, chars) == pytest.approx(1.0, abs=1e-10)


def test_white_noise_r2_small():
    rng = np.random.default_rng(21)
    T, N, L = 200, 50, 5
    R = 0.05 * rng.standard_normal((T, N))
    Z = rng.standard_normal((T, N, L))
    panel, chars = _panels(R, Z)
    r2 = ipca_total_r2(fit_ipca(panel, chars, 1), panel, chars)
    assert 0.0 <= r2 < 0.2


def test_zero_gamma_r2_is_zero(noiseless):
    panel, chars, _, model = noiseless
    zero = IPCAModel(Gamma=np.zeros_like(model.Gamma), factors=model.factors, K=2,
                     objective_path=(), residual_variances=model.residual_variances,
                     factor_cov=model.factor_cov)
    assert ipca_total_r2(zero, panel, chars) == 0.0


def test_zero_total_sum_of_squares():
    R = np.zeros((5, 3))
    Z = np.ones((5, 3, 2))
    panel, chars = _panels(R, Z)
    model = IPCAModel(Gamma=np.ones((2, 1)) / np.sqrt(2), factors=np.zeros((1, 4)), K=1,
                      objective_path=(), residual_variances=np.zeros(3), factor_cov=np.zeros((1, 1)))
    with pytest.raises(EstimationError):
        ipca_total_r2(model, panel, chars)


def _hand_model():
    return IPCAModel(Gamma=np.array([[0.6], [0.8]]), factors=np.zeros((1, 3)), K=1,
                     objective_path=(), residual_variances=np.array([0.1, 0.2, 0.3]),
                     factor_cov=np.array([[2.0]]))


def test_covariance_hand_assembly():
    # B = Z Gamma = (0.6, 0.8, 1.4); 2 B B' + diag(0.1, 0.2, 0.3)
    Z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    M = ipca_covariance(_hand_model(), Z).matrix
    expect = np.array([[0.82, 0.96, 1.68], [0.96, 1.48, 2.24], [1.68, 2.24, 4.22]])
    np.testing.assert_allclose(M, expect, atol=1e-14)


def test_covariance_zero_characteristics_is_residual_diagonal():
    M = ipca_covariance(_hand_model(), np.zeros((3, 2))).matrix
    np.testing.assert_array_equal(M, np.diag([0.1, 0.2, 0.3]))


def test_covariance_low_rank_without_residuals(noiseless):
    model = noiseless[3]
    Z = noiseless[1].Z[-1]
    M = ipca_covariance(model, Z, residual_variances=np.zeros(30)).matrix
    assert np.linalg.matrix_rank(M, tol=1e-10 * np.abs(M).max()) <= 2


def test_covariance_symmetric_psd():
    panel, chars, _ = gen_synthetic_panel(25, 60, 5, 2, 0.05, 3)
    model = fit_ipca(panel, chars, 3)
    for t in (0, 30, 59):
        M = ipca_covariance(model, chars.Z[t]).matrix
        np.testing.assert_allclose(M, M.T, atol=1e-12)
        lam = np.linalg.eigvalsh(M)
        assert lam[0] >= -1e-10 * lam[-1]


def test_covariance_errors():
    with pytest.raises(DimensionError):
        ipca_covariance(_hand_model(), np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        ipca_covariance(_hand_model(), np.zeros((4, 2)))
    with pytest.raises(EstimationError):
        ipca_covariance(None, np.zeros((3, 2)))


def test_factor_update_is_per_date():
    panel, chars, _ = gen_synthetic_panel(15, 30, 4, 2, 0.05, 9)
    gamma = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 2)))[0]
    base, _ = kernels.ipca_factors(*_mom_arrays(panel, chars), gamma)
    vals = np.array(panel.values)
    t = 12
    vals[t + 1:] += 0.03
    bumped = ReturnsPanel(panel.dates, panel.assets, vals)
    after, _ = kernels.ipca_factors(*_mom_arrays(bumped, chars), gamma)
    # factor s pairs Z_s with returns at s + 1, so factors up to index t - 1 are untouched
    np.testing.assert_array_equal(after[:t], base[:t])
    assert not np.allclose(after[t:], base[t:])


def _mom_arrays(panel, chars):
    m = _moments(panel, chars)
    return m.W, m.X


def test_singular_date_is_ridged_and_flagged():
    panel, chars, _ = gen_synthetic_panel(12, 20, 3, 2, 0.05, 2)
    Z = np.array(chars.Z)
    Z[5] = 0.0
    chars0 = CharacteristicsPanel(chars.dates, chars.assets, chars.names, Z)
    model = fit_ipca(panel, chars0, 2)
    assert 5 in model.diagnostics["ridge_dates"]
    assert np.all(np.isfinite(model.factors))


def test_json_round_trip(noiseless):
    model = noiseless[3]
    back = IPCAModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.Gamma, model.Gamma)
    np.testing.assert_array_equal(back.factors, model.factors)
    assert back.objective_path == model.objective_path


def test_non_convergence_warns():
    panel, chars, _ = gen_synthetic_panel(20, 40, 4, 2, 0.3, 5)
    with pytest.warns(RuntimeWarning):
        model = fit_ipca(panel, chars, 2, tol=1e-300, max_sweeps=2)
    assert not model.converged


def test_rank_transform_option():
    panel, chars, _ = gen_synthetic_panel(20, 30, 3, 1, 0.05, 6)
    model = fit_ipca(panel, chars, 1, rank_chars=True)
    assert model.diagnostics["rank_transformed"]
