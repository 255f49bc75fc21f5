import math

import numpy as np
import pytest
from hypothesis import assume, example, given, strategies as st

from portqp.errors import DimensionError, PortQPError
from portqp.metrics import (DrawdownEpisode, compute_metrics, cumulative_returns, drawdown_profile,
                            end_of_year_returns, metrics_table_csv, rolling_beta, rolling_sharpe,
                            rolling_volatility, underwater_curve)

returns_lists = st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=2, max_size=80)


def _max_drawdown_loop(r):
    equity, peak, worst = 1.0, 1.0, 0.0
    for x in r:
        equity *= 1.0 + x
        peak = max(peak, equity)
        worst = min(worst, equity / peak - 1.0)
    return worst


def test_cumulative_hand_value():
    # 1.10 * 0.95 * 1.02 - 1
    assert compute_metrics([0.10, -0.05, 0.02]).cumulative_return == pytest.approx(0.0659, abs=1e-12)


def test_max_drawdown_hand_value():
    # equity 1.10, 0.88, 0.924: peak 1.10, trough 0.88
    assert compute_metrics([0.10, -0.20, 0.05]).max_drawdown == pytest.approx(-0.20, abs=1e-12)


def test_hand_episode():
    eps = drawdown_profile([0.1, -0.2, 0.05, 0.3])
    assert len(eps) == 1
    e = eps[0]
    assert e.depth == pytest.approx(-0.2, abs=1e-12)
    # below the peak at periods 2 and 3 (1-based), back above at period 4
    assert (e.start, e.trough, e.end, e.length) == (1, 1, 3, 2)


def test_monotone_up_has_no_episodes():
    assert drawdown_profile([0.01, 0.02, 0.0, 0.03]) == []


def test_crash_then_flat():
    eps = drawdown_profile([0.0, -0.3, 0.0, 0.0])
    assert eps == [DrawdownEpisode(start=1, trough=1, end=None, depth=pytest.approx(-0.3), length=3)]


def test_self_benchmark():
    rng = np.random.default_rng(3)
    r = rng.normal(0.01, 0.04, 120)
    rep = compute_metrics(r, benchmark=r)
    assert rep.beta == pytest.approx(1.0, abs=1e-12)
    assert rep.correlation == pytest.approx(1.0, abs=1e-12)
    assert rep.alpha == pytest.approx(0.0, abs=1e-12)


def test_benchmark_fields_absent_without_benchmark():
    rep = compute_metrics([0.01, -0.02, 0.03])
    assert "beta" not in rep.to_dict()
    assert rep.beta is None and rep.treynor is None


def test_zero_volatility_flags_ratios():
    rep = compute_metrics([0.01, 0.01, 0.01])
    assert rep.sharpe is None
    assert rep.sortino is None
    assert rep.volatility_ann == 0.0


def test_errors():
    with pytest.raises(PortQPError):
        compute_metrics([0.01])
    with pytest.raises(DimensionError):
        compute_metrics([0.01, 0.02], benchmark=[0.01, 0.02, 0.03])
    with pytest.raises(PortQPError):
        compute_metrics([0.01, np.nan])


def test_hand_ratios():
    r = np.array([0.10, -0.05, 0.02])
    rep = compute_metrics(r)
    mean = (0.10 - 0.05 + 0.02) / 3
    sd = math.sqrt(sum((x - mean) ** 2 for x in r) / 2)
    assert rep.sharpe == pytest.approx(mean / sd * math.sqrt(12), rel=1e-12)
    assert rep.sortino == pytest.approx(mean / math.sqrt(0.05 ** 2 / 3) * math.sqrt(12), rel=1e-12)
    assert rep.omega == pytest.approx(0.12 / 0.05, rel=1e-12)
    assert rep.kelly == pytest.approx(mean / sd ** 2, rel=1e-12)
    assert rep.var_95 == -0.05 and rep.cvar_95 == -0.05
    assert rep.cagr == pytest.approx(1.0659 ** 4 - 1, rel=1e-12)
    assert rep.time_in_market == 1.0


def test_positions_drive_time_in_market():
    pos = np.array([[0.5, 0.5], [0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    assert compute_metrics([0.01, 0.0, 0.02, 0.0], positions=pos).time_in_market == 0.5


@given(r=returns_lists)
def test_cumulative_log_identity(r):
    r = np.array(r)
    rep = compute_metrics(r)
    assert rep.cumulative_return == pytest.approx(math.expm1(np.sum(np.log1p(r))), abs=1e-12)


@given(r=returns_lists)
def test_drawdown_against_loop(r):
    rep = compute_metrics(r)
    assert rep.max_drawdown == pytest.approx(_max_drawdown_loop(r), abs=1e-12)
    assert rep.max_drawdown <= 0.0
    assert 0.0 <= rep.time_in_market <= 1.0


@given(r=returns_lists)
def test_calmar_identity(r):
    rep = compute_metrics(r)
    if rep.max_drawdown < 0:
        assert rep.calmar == rep.cagr / abs(rep.max_drawdown)
    else:
        assert rep.calmar is None


@given(r=returns_lists)
def test_shift_moves_sharpe_numerator_only(r):
    r = np.array(r)
    assume(np.std(r) > 1e-6)
    a, b = compute_metrics(r), compute_metrics(r + 0.01)
    assert b.volatility_ann == pytest.approx(a.volatility_ann, rel=1e-9)
    sd = np.std(r, ddof=1)
    assert b.sharpe - a.sharpe == pytest.approx(0.01 * math.sqrt(12) / sd, rel=1e-7, abs=1e-9)


@given(r=returns_lists)
@example(r=[-0.18790923274181476] * 3)
def test_cvar_below_var_below_zero(r):
    r = np.array(r)
    rep = compute_metrics(r)
    assert rep.cvar_95 <= rep.var_95
    if np.mean(r < 0) >= 0.05:
        assert rep.var_95 <= 0.0


@given(r=returns_lists)
def test_omega_matches_partial_sums(r):
    r = np.array(r)
    pos = sum(x for x in r if x > 0)
    neg = sum(-x for x in r if x < 0)
    rep = compute_metrics(r)
    if neg == 0:
        assert rep.omega is None
    else:
        assert (rep.omega > 1) == (pos > neg)


@given(r=returns_lists)
def test_episodes_partition_underwater_periods(r):
    uw = underwater_curve(r)
    below = set(np.flatnonzero(uw < 0).tolist())
    covered = set()
    for e in drawdown_profile(r):
        span = set(range(e.start, e.start + e.length))
        assert not covered & span
        covered |= span
        assert e.depth == pytest.approx(uw[e.start:e.start + e.length].min(), abs=0)
    assert covered == below


def test_rolling_series():
    rng = np.random.default_rng(1)
    r = rng.normal(0.01, 0.03, 24)
    b = rng.normal(0.01, 0.03, 24)
    rs, rv, rb = rolling_sharpe(r), rolling_volatility(r), rolling_beta(r, b)
    assert np.all(np.isnan(rs[:5])) and np.all(np.isfinite(rs[5:]))
    w = r[-6:]
    assert rv[-1] == pytest.approx(w.std(ddof=1) * math.sqrt(12), rel=1e-12)
    assert rs[-1] == pytest.approx(w.mean() / w.std(ddof=1) * math.sqrt(12), rel=1e-12)
    slope = np.polyfit(b[-6:], r[-6:], 1)[0]
    assert rb[-1] == pytest.approx(slope, rel=1e-9)


def test_cumulative_and_yearly():
    r = [0.1, -0.1, 0.2]
    np.testing.assert_allclose(cumulative_returns(r), [0.1, -0.01, 0.188], atol=1e-15)
    years = end_of_year_returns(r, ["2020-11-30", "2020-12-31", "2021-01-31"])
    assert years["2020"] == pytest.approx(-0.01, abs=1e-15)
    assert years["2021"] == pytest.approx(0.2, abs=1e-15)


def test_table_csv():
    a = compute_metrics([0.01, -0.02, 0.03])
    b = compute_metrics([0.02, 0.01, -0.01])
    text = metrics_table_csv({"A": a, "B": b})
    lines = text.splitlines()
    assert lines[0] == "metric,A,B"
    assert lines[1].startswith("time_in_market,1.0")
    assert not any(ln.startswith("beta") for ln in lines)
