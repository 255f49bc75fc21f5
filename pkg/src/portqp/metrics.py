"""Performance metrics for a periodic return series.

Conventions: risk-free rate 0; annualization by ``periods_per_year`` (never
inferred); Sortino uses the downside deviation about 0 over all periods;
VaR/CVaR are the empirical 5% quantile (lower order statistic) and the mean
of returns at or below it; Kelly is mean/variance; alpha is the annualized OLS
intercept on the benchmark and Treynor the annualized mean over beta.
Undefined ratios are reported as ``None``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy import stats

from . import kernels
from ._io import atomic_write_text, fmt_float
from .errors import DimensionError, PortQPError

DAYS_PER_MONTH = 30.44  # display-only conversion for period counts


@dataclass(frozen=True)
class DrawdownEpisode:
    start: int             # first period below the running peak
    trough: int            # period of the deepest point
    end: Optional[int]     # first period back at the peak, None if unrecovered
    depth: float           # underwater value at the trough (<= 0)
    length: int            # periods spent below the peak


@dataclass(frozen=True)
class MetricReport:
    time_in_market: float
    cumulative_return: float
    cagr: float
    sharpe: Optional[float]
    sortino: Optional[float]
    omega: Optional[float]
    max_drawdown: float
    longest_dd_periods: int
    volatility_ann: float
    calmar: Optional[float]
    kurtosis: Optional[float]
    expected_yearly: float
    kelly: Optional[float]
    var_95: float
    cvar_95: float
    avg_drawdown: float
    avg_dd_periods: float
    beta: Optional[float] = None
    alpha: Optional[float] = None
    correlation: Optional[float] = None
    treynor: Optional[float] = None

    def to_dict(self, include_benchmark=None):
        d = asdict(self)
        if include_benchmark is False or (include_benchmark is None and self.beta is None
                                          and self.correlation is None):
            for k in ("beta", "alpha", "correlation", "treynor"):
                d.pop(k)
        return d


METRIC_NAMES = tuple(f.name for f in fields(MetricReport))


def _series(returns, name="returns"):
    r = np.asarray(returns, dtype=float).reshape(-1)
    if not np.all(np.isfinite(r)):
        raise PortQPError(f"{name} contain non-finite values")
    return r


def underwater_curve(returns):
    """Equity / running peak - 1, with the starting equity of 1 as a peak."""
    return kernels.underwater(_series(returns))


def drawdown_profile(returns):
    r = _series(returns)
    uw = underwater_curve(r) if r.size else r
    out = []
    t = 0
    n = r.size
    while t < n:
        if uw[t] < 0.0:
            start = t
            while t < n and uw[t] < 0.0:
                t += 1
            seg = uw[start:t]
            trough = start + int(np.argmin(seg))
            end = t if t < n else None
            out.append(DrawdownEpisode(start=start, trough=trough, end=end,
                                       depth=float(seg.min()), length=t - start))
        else:
            t += 1
    return out


def _ratio(num, den):
    if den == 0.0 or not np.isfinite(den):
        return None
    return float(num / den)


def compute_metrics(returns, benchmark=None, periods_per_year: int = 12, positions=None) -> MetricReport:
    r = _series(returns)
    n = r.size
    if n < 2:
        raise PortQPError("need at least two periods")
    if periods_per_year <= 0:
        raise PortQPError("periods_per_year must be positive")
    ppy = float(periods_per_year)
    if positions is None:
        tim = float(np.mean(r != 0.0))
    else:
        pos = np.asarray(positions, dtype=float)
        if pos.shape[0] != n:
            raise DimensionError("positions are not aligned with returns")
        active = np.abs(pos).sum(axis=1) > 0 if pos.ndim == 2 else pos != 0
        tim = float(np.mean(active))

    growth = np.prod(1.0 + r)
    cum = float(growth - 1.0)
    cagr = float(growth ** (ppy / n) - 1.0) if growth > 0 else -1.0
    mean = float(r.mean())
    sd = float(r.std(ddof=1))
    root = math.sqrt(ppy)
    sharpe = None if sd == 0.0 else mean / sd * root
    downside = math.sqrt(float(np.sum(np.minimum(r, 0.0) ** 2)) / n)
    sortino = None if downside == 0.0 else mean / downside * root
    gains = float(np.sum(np.maximum(r, 0.0)))
    losses = float(np.sum(np.maximum(-r, 0.0)))
    omega = None if losses == 0.0 else gains / losses
    episodes = drawdown_profile(r)
    mdd = float(min(0.0, underwater_curve(r).min()))
    calmar = None if mdd >= 0.0 else cagr / abs(mdd)
    kurt = float(stats.kurtosis(r, fisher=True, bias=False)) if n >= 4 and sd > 0 else None
    var = float(r.var(ddof=1))
    kelly = None if var == 0.0 else mean / var
    var95 = float(np.quantile(r, 0.05, method="lower"))
    # a mean of values <= var95 cannot exceed it; clip the summation round-off
    cvar95 = min(float(r[r <= var95].mean()), var95)
    avg_dd = float(np.mean([e.depth for e in episodes])) if episodes else 0.0
    avg_len = float(np.mean([e.length for e in episodes])) if episodes else 0.0
    longest = max((e.length for e in episodes), default=0)

    beta = alpha = corr = treynor = None
    if benchmark is not None:
        b = _series(benchmark, "benchmark")
        if b.shape != r.shape:
            raise DimensionError(f"benchmark has {b.size} periods, returns {n}")
        rc = r - mean
        bc = b - b.mean()
        sxy = float(rc @ bc)
        sxx = float(bc @ bc)
        syy = float(rc @ rc)
        if sxx > 0.0:
            beta = sxy / sxx
            alpha = (mean - beta * float(b.mean())) * ppy
            treynor = _ratio(mean * ppy, beta)
        if sxx > 0.0 and syy > 0.0:
            corr = sxy / math.sqrt(sxx * syy)

    return MetricReport(time_in_market=tim, cumulative_return=cum, cagr=cagr, sharpe=sharpe,
                        sortino=sortino, omega=omega, max_drawdown=mdd, longest_dd_periods=longest,
                        volatility_ann=sd * root, calmar=calmar, kurtosis=kurt, expected_yearly=cagr,
                        kelly=kelly, var_95=var95, cvar_95=cvar95, avg_drawdown=avg_dd,
                        avg_dd_periods=avg_len, beta=beta, alpha=alpha, correlation=corr,
                        treynor=treynor)


def annualized_sharpe(returns, periods_per_year=12):
    r = _series(returns)
    sd = r.std(ddof=1)
    return None if sd == 0.0 else float(r.mean() / sd * math.sqrt(periods_per_year))


# ---------------------------------------------------------------------------
# Series for plots
# ---------------------------------------------------------------------------


def rolling_sharpe(returns, window=6, periods_per_year=12):
    r = _series(returns)
    out = np.full(r.size, np.nan)
    for t in range(window - 1, r.size):
        s = annualized_sharpe(r[t - window + 1:t + 1], periods_per_year)
        out[t] = np.nan if s is None else s
    return out


def rolling_volatility(returns, window=6, periods_per_year=12):
    r = _series(returns)
    out = np.full(r.size, np.nan)
    for t in range(window - 1, r.size):
        out[t] = r[t - window + 1:t + 1].std(ddof=1) * math.sqrt(periods_per_year)
    return out


def rolling_beta(returns, benchmark, window=6):
    r = _series(returns)
    b = _series(benchmark, "benchmark")
    if b.shape != r.shape:
        raise DimensionError("benchmark is not aligned with returns")
    out = np.full(r.size, np.nan)
    for t in range(window - 1, r.size):
        rr = r[t - window + 1:t + 1]
        bb = b[t - window + 1:t + 1]
        bc = bb - bb.mean()
        v = bc @ bc
        if v > 0:
            out[t] = ((rr - rr.mean()) @ bc) / v
    return out


def cumulative_returns(returns):
    return np.cumprod(1.0 + _series(returns)) - 1.0


def end_of_year_returns(returns, dates):
    """Compounded return per calendar year (keys from the ``YYYY`` date prefix)."""
    r = _series(returns)
    if len(dates) != r.size:
        raise DimensionError("dates are not aligned with returns")
    out = {}
    for d, v in zip(dates, r):
        y = str(d)[:4]
        out[y] = out.get(y, 1.0) * (1.0 + v)
    return {y: g - 1.0 for y, g in out.items()}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return fmt_float(v)


def metrics_table_csv(reports: dict, path=None):
    """Metric-by-strategy table (one column per strategy); returns the CSV text."""
    names = list(reports)
    with_bm = any(rep.beta is not None or rep.correlation is not None for rep in reports.values())
    rows = [m for m in METRIC_NAMES if with_bm or m not in ("beta", "alpha", "correlation", "treynor")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric"] + names)
    for m in rows:
        w.writerow([m] + [_cell(getattr(reports[n], m)) for n in names])
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text


def write_series_csv(path, dates, columns: dict):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(columns)
    w.writerow(["date"] + keys)
    for i, d in enumerate(dates):
        w.writerow([d] + [fmt_float(columns[k][i]) for k in keys])
    atomic_write_text(path, buf.getvalue())
