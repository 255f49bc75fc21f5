"""Numba kernels against their numpy twins, and both backends end to end."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from portqp import _accel, kernels
from portqp.backtest import paper_long_short_template
from portqp.covariance import sample_cov
from portqp.data_io import gen_synthetic_panel
from portqp.ipca import fit_ipca
from portqp.metrics import compute_metrics
from portqp.portfolio import equal_risk_contribution, solve_portfolio

from helpers import random_pd


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def backend(request, monkeypatch):
    monkeypatch.setattr(_accel, "USE_NUMBA", request.param)
    return request.param


def test_backend_flag_reflects_environment():
    assert _accel.backend() in ("numba", "numpy")


@given(r=st.lists(st.floats(-0.9, 2.0), min_size=1, max_size=60))
def test_underwater_twins(r):
    r = np.array(r)
    np.testing.assert_allclose(kernels.underwater_nb(r), kernels.underwater_np(r), rtol=0, atol=1e-14)


def test_erc_twins(rng):
    cov = random_pd(rng, 25)
    b = np.full(25, 1 / 25)
    x0 = np.full(25, 0.2)
    xa, ia, ea = kernels.erc_ccd_nb(cov, b, x0.copy(), 1e-13, 10_000)
    xb, ib, eb = kernels.erc_ccd_np(cov, b, x0.copy(), 1e-13, 10_000)
    np.testing.assert_allclose(xa, xb, rtol=1e-12)
    assert ia == ib


def test_ipca_twins(rng):
    T, L, K, N = 30, 5, 2, 12
    Z = rng.standard_normal((T, N, L))
    r = rng.standard_normal((T, N))
    W = np.einsum("tnl,tnm->tlm", Z, Z)
    X = np.einsum("tnl,tn->tl", Z, r)
    G = np.linalg.qr(rng.standard_normal((L, K)))[0]
    Fa, fa = kernels.ipca_factors_nb(W, X, G, 1e-10)
    Fb, fb = kernels.ipca_factors_np(W, X, G, 1e-10)
    np.testing.assert_allclose(Fa, Fb, rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(fa, fb)
    Ma, ba = kernels.ipca_gamma_system_nb(W, X, Fa)
    Mb, bb = kernels.ipca_gamma_system_np(W, X, Fa)
    np.testing.assert_allclose(Ma, Mb, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ba, bb, rtol=1e-10, atol=1e-12)


def test_ipca_singular_date_is_flagged(rng):
    L, K = 3, 2
    W = np.zeros((2, L, L))
    W[1] = np.eye(L)
    X = rng.standard_normal((2, L))
    G = np.linalg.qr(rng.standard_normal((L, K)))[0]
    for fn in (kernels.ipca_factors_nb, kernels.ipca_factors_np):
        F, flags = fn(W, X, G, 1e-10)
        assert flags.tolist() == [True, False]
        np.testing.assert_array_equal(F[0], 0.0)


def _long_short_problem(n, seed=3):
    panel, _, _ = gen_synthetic_panel(n, 200, 4, 2, 0.05, seed)
    cov = sample_cov(panel.values).matrix
    mu = panel.values.mean(axis=0)
    if mu.sum() <= 0:
        mu = mu + 2 * abs(mu.min())
    return paper_long_short_template(l1=1e-4, l2=1e-2).instantiate(cov, mu)


def test_portfolio_solve_agrees_across_backends(monkeypatch):
    spec = _long_short_problem(40)
    out = {}
    for flag in (True, False):
        monkeypatch.setattr(_accel, "USE_NUMBA", flag)
        out[flag] = solve_portfolio(spec)[0]
    np.testing.assert_allclose(out[True], out[False], atol=1e-7)


def test_erc_and_ipca_agree_across_backends(monkeypatch, rng):
    cov = random_pd(rng, 10)
    panel, chars, _ = gen_synthetic_panel(20, 60, 4, 2, 0.1, 11)
    res = {}
    for flag in (True, False):
        monkeypatch.setattr(_accel, "USE_NUMBA", flag)
        model = fit_ipca(panel, chars, 2)
        res[flag] = (equal_risk_contribution(cov), model.Gamma,
                     compute_metrics(panel.values[:, 0]).max_drawdown)
    np.testing.assert_allclose(res[True][0], res[False][0], atol=1e-12)
    np.testing.assert_allclose(res[True][1], res[False][1], atol=1e-8)
    assert res[True][2] == pytest.approx(res[False][2], abs=1e-15)


def test_underwater_dispatch(backend):
    uw = kernels.underwater(np.array([0.1, -0.2, 0.05, 0.3]))
    np.testing.assert_allclose(uw, [0.0, -0.2, 0.924 / 1.1 - 1, 0.0], atol=1e-14)
