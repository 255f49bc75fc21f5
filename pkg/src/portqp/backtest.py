"""Rolling-window out-of-sample backtests and regularization grid search.

At rebalance index ``t`` the estimators see only rows ``t-W+1 .. t`` of the
panel; the resulting weights earn the returns of row ``t+1``. Between
rebalances the weights drift with realized returns, and turnover is measured
against the drifted weights.
"""
from __future__ import annotations

import csv
import io
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import covariance as cv
from ._io import atomic_write_text, fmt_float, write_json
from .data_io import CharacteristicsPanel, ReturnsPanel
from .errors import DataError, PortQPError
from .metrics import annualized_sharpe, compute_metrics
from .portfolio import (MaxSharpe, PortfolioSpec, Regularization, constraints_from_dict,
                        objective_from_dict, objective_to_dict, solve_portfolio)
from .qp import PRESETS

UNIVERSE_RULES = ("FullHistoryOnly", "MembershipMask")
THREADS_ENV = "PORTQP_NUM_THREADS"
DEFAULT_LAMBDA1 = tuple(np.logspace(-6, -1, 5))
DEFAULT_LAMBDA2 = tuple(np.logspace(np.log10(1e-2), np.log10(5.0), 5))


@dataclass(frozen=True)
class SpecTemplate:
    """Portfolio problem without data; constraint entries may be scalars
    (broadcast to the window universe). Turnover constraints given without
    ``w_prev`` are anchored to the drifted pre-rebalance weights."""

    objective: object = field(default_factory=MaxSharpe)
    constraints: dict = field(default_factory=lambda: {"budget": True})
    regularization: Regularization = field(default_factory=Regularization)

    def to_dict(self):
        return {"objective": objective_to_dict(self.objective), "constraints": self.constraints,
                "regularization": {"l1": self.regularization.l1, "l2": self.regularization.l2}}

    @classmethod
    def from_dict(cls, d):
        reg = d.get("regularization", {})
        return cls(objective=objective_from_dict(d.get("objective", {"kind": "MaxSharpe"})),
                   constraints=dict(d.get("constraints", {"budget": True})),
                   regularization=Regularization(float(reg.get("l1", 0.0)), float(reg.get("l2", 0.0))))

    def instantiate(self, cov, mu, w_prev=None) -> PortfolioSpec:
        n = cov.shape[0]
        c = dict(self.constraints)
        for key in ("turnover_individual", "turnover_total"):
            if key in c:
                t = dict(c[key])
                if t.get("w_prev") is None:
                    t["w_prev"] = np.zeros(n) if w_prev is None else w_prev
                if key == "turnover_individual" and np.ndim(t["limit"]) == 0:
                    t["limit"] = np.full(n, float(t["limit"]))
                c[key] = t
        return PortfolioSpec(objective=self.objective, cov=cov, mu=mu,
                             constraints=constraints_from_dict(c, n),
                             regularization=self.regularization)


def paper_long_short_template(theta=0.2, lower=-0.08, upper=0.08, l1=0.0, l2=0.0) -> SpecTemplate:
    """Fully invested max-Sharpe, long-short limit ``theta`` and per-asset box."""
    return SpecTemplate(objective=MaxSharpe(0.0),
                        constraints={"budget": True, "long_short": theta,
                                     "box": {"lower": lower, "upper": upper}},
                        regularization=Regularization(l1, l2))


@dataclass(frozen=True)
class BacktestConfig:
    window_length: int = 360
    rebalance_every: int = 1
    estimator: str = "Sample"
    estimator_params: dict = field(default_factory=dict)
    spec_template: SpecTemplate = field(default_factory=paper_long_short_template)
    universe_rule: str = "FullHistoryOnly"
    membership: Optional[np.ndarray] = None       # T x N, MembershipMask only
    lambda1_grid: Optional[tuple] = None
    lambda2_grid: Optional[tuple] = None
    precision: str = "high"
    repair_floor: Optional[float] = 1e-8          # zero-eigenvalue repair, None disables
    periods_per_year: int = 12

    def __post_init__(self):
        if self.window_length < 2:
            raise PortQPError("window_length must be >= 2")
        if self.rebalance_every < 1:
            raise PortQPError("rebalance_every must be >= 1")
        if self.estimator not in cv.ESTIMATORS:
            raise PortQPError(f"unknown estimator {self.estimator!r}; expected one of {cv.ESTIMATORS}")
        if self.universe_rule not in UNIVERSE_RULES:
            raise PortQPError(f"unknown universe rule {self.universe_rule!r}")
        if self.precision not in PRESETS:
            raise PortQPError(f"unknown precision {self.precision!r}")

    def to_dict(self):
        return {"window_length": self.window_length, "rebalance_every": self.rebalance_every,
                "estimator": self.estimator, "estimator_params": dict(self.estimator_params),
                "spec_template": self.spec_template.to_dict(), "universe_rule": self.universe_rule,
                "lambda1_grid": None if self.lambda1_grid is None else list(self.lambda1_grid),
                "lambda2_grid": None if self.lambda2_grid is None else list(self.lambda2_grid),
                "precision": self.precision, "repair_floor": self.repair_floor,
                "periods_per_year": self.periods_per_year}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "spec_template" in d:
            d["spec_template"] = SpecTemplate.from_dict(d["spec_template"])
        for k in ("lambda1_grid", "lambda2_grid"):
            if d.get(k) is not None:
                d[k] = tuple(float(v) for v in d[k])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise PortQPError(f"unknown backtest settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class BacktestResult:
    dates: tuple                 # out-of-sample period labels
    assets: tuple
    rebalance_dates: tuple       # formation dates; weights earn the next period
    weights_history: np.ndarray  # R x N (zero outside the window universe)
    oos_returns: np.ndarray
    turnover_series: np.ndarray  # R
    diagnostics: dict

    def sharpe(self, periods_per_year=12):
        return annualized_sharpe(self.oos_returns, periods_per_year)

    def metrics(self, benchmark=None, periods_per_year=12):
        return compute_metrics(self.oos_returns, benchmark, periods_per_year)


@dataclass(frozen=True, eq=False)
class WindowEstimate:
    universe: np.ndarray          # asset indices
    mu: Optional[np.ndarray]
    cov: Optional[np.ndarray]
    error: Optional[str] = None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Per-window estimation
# ---------------------------------------------------------------------------


def _window_universe(returns: ReturnsPanel, cfg: BacktestConfig, t: int):
    lo = t - cfg.window_length + 1
    win_mask = returns.mask[lo:t + 1]
    if cfg.universe_rule == "FullHistoryOnly":
        return np.flatnonzero(win_mask.all(axis=0))
    member = returns.mask if cfg.membership is None else np.asarray(cfg.membership, dtype=bool)
    if member.shape != returns.values.shape:
        raise DataError("membership mask shape does not match the returns panel")
    enough = win_mask.sum(axis=0) >= max(2, cfg.window_length // 2)
    return np.flatnonzero(member[t] & enough)


def _window_matrix(returns: ReturnsPanel, lo, t, universe):
    R = np.array(returns.values[lo:t + 1][:, universe])
    miss = ~np.isfinite(R)
    if miss.any():
        # mean imputation within the window (MembershipMask mode only)
        col_mean = np.nanmean(np.where(miss, np.nan, R), axis=0)
        R[miss] = np.take(col_mean, np.nonzero(miss)[1])
    return R


def estimate_window(returns: ReturnsPanel, chars: Optional[CharacteristicsPanel],
                    cfg: BacktestConfig, t: int) -> WindowEstimate:
    """Sample-mean mu and the configured covariance from rows t-W+1..t only."""
    lo = t - cfg.window_length + 1
    universe = _window_universe(returns, cfg, t)
    if universe.size == 0:
        return WindowEstimate(universe, None, None, "empty universe")
    try:
        R = _window_matrix(returns, lo, t, universe)
        mu = R.mean(axis=0)
        est = _estimate_cov(R, returns, chars, cfg, lo, t, universe)
        if cfg.repair_floor is not None:
            est = cv.repair_singular(est, cfg.repair_floor)
        diag = {k: v for k, v in est.diagnostics.items()
                if not isinstance(v, (np.ndarray, list)) or np.size(v) <= 8}
        return WindowEstimate(universe, mu, est.matrix, None, diag)
    except (PortQPError, np.linalg.LinAlgError) as exc:
        return WindowEstimate(universe, None, None, f"{type(exc).__name__}: {exc}")


def _estimate_cov(R, returns, chars, cfg, lo, t, universe):
    p = cfg.estimator_params
    if cfg.estimator == "Sample":
        return cv.sample_cov(R)
    if cfg.estimator == "LinearShrinkage":
        return cv.linear_shrinkage(R)
    if cfg.estimator == "QIS":
        return cv.qis_shrinkage(R, method=p.get("method", "analytical"))
    from .ipca import fit_ipca, ipca_covariance  # noqa: PLC0415 (optional estimator)

    if chars is None:
        raise PortQPError("IPCA estimator requires a characteristics panel")
    sub_r = returns.slice(lo, t + 1).select_assets(universe)
    sub_c = chars.slice(lo, t + 1).select_assets(universe)
    model = fit_ipca(sub_r, sub_c, int(p.get("K", 3)), tol=float(p.get("tol", 1e-9)),
                     max_sweeps=int(p.get("max_sweeps", 500)),
                     rank_chars=bool(p.get("rank_chars", False)))
    Z_t = np.nan_to_num(sub_c.Z[-1])
    est = ipca_covariance(model, Z_t)
    est.diagnostics.update({"ipca_sweeps": model.sweeps, "ipca_converged": model.converged})
    return est


def _rebalance_indices(T, cfg):
    return list(range(cfg.window_length - 1, T - 1, cfg.rebalance_every))


def _check_inputs(returns, chars, cfg):
    if returns.T <= cfg.window_length:
        raise DataError(f"panel has {returns.T} periods; need more than window_length={cfg.window_length}")
    if cfg.estimator == "IPCA":
        if chars is None:
            raise PortQPError("IPCA estimator requires a characteristics panel")
        if chars.T != returns.T or tuple(chars.assets) != tuple(returns.assets):
            raise DataError("characteristics panel is not aligned with the returns panel")


def estimate_all_windows(returns, chars, cfg):
    """Estimates for every rebalance date; independent of the regularization."""
    _check_inputs(returns, chars, cfg)
    return {t: estimate_window(returns, chars, cfg, t) for t in _rebalance_indices(returns.T, cfg)}


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def _optimize(est: WindowEstimate, cfg: BacktestConfig, w_drift, warm):
    if est.error is not None:
        raise PortQPError(est.error)
    spec = cfg.spec_template.instantiate(est.cov, est.mu, w_drift[est.universe])
    w, sol, _ = solve_portfolio(spec, PRESETS[cfg.precision], warm_start=warm)
    if sol is None:
        return w, "Solved", None
    return w, sol.status.value, (sol.x, sol.y)


def run_backtest(returns: ReturnsPanel, chars: Optional[CharacteristicsPanel], config: BacktestConfig,
                 estimates: Optional[dict] = None) -> BacktestResult:
    """``estimates`` (from :func:`estimate_all_windows`) may be shared across runs."""
    cfg = config
    _check_inputs(returns, chars, cfg)
    if estimates is None:
        estimates = estimate_all_windows(returns, chars, cfg)
    T, N, W = returns.T, returns.N, cfg.window_length
    R = np.nan_to_num(returns.values, nan=0.0)
    reb = set(_rebalance_indices(T, cfg))
    w = np.zeros(N)
    oos = np.empty(T - W)
    hist, turns, reb_dates, statuses, failures = [], [], [], [], []
    missing = 0
    warm = None  # previous QP solution; depends only on earlier windows
    for k, t in enumerate(range(W - 1, T - 1)):
        if t in reb:
            est = estimates[t]
            try:
                w_sub, status, warm = _optimize(est, cfg, w, warm)
                w_new = np.zeros(N)
                w_new[est.universe] = w_sub
            except PortQPError as exc:
                status = "CarriedForward"
                failures.append({"date": returns.dates[t], "error": f"{type(exc).__name__}: {exc}"})
                if np.any(w):
                    w_new = w.copy()
                else:
                    w_new = np.zeros(N)
                    u = est.universe if est.universe.size else np.arange(N)
                    w_new[u] = 1.0 / u.size
            turns.append(float(np.abs(w_new - w).sum()))
            hist.append(w_new)
            reb_dates.append(returns.dates[t])
            statuses.append(status)
            w = w_new
        r_next = R[t + 1]
        missing += int(np.count_nonzero(w[~returns.mask[t + 1]]))
        rp = float(w @ r_next)
        oos[k] = rp
        gross = w * (1.0 + r_next)
        w = gross / gross.sum() if gross.sum() != 0 else w
    diag = {"statuses": statuses, "failures": failures, "n_failures": len(failures),
            "held_missing_returns": missing, "estimator": cfg.estimator,
            "window_diagnostics": {returns.dates[t]: {"n_assets": int(e.universe.size), **e.diagnostics}
                                   for t, e in sorted(estimates.items()) if t in reb}}
    return BacktestResult(dates=tuple(returns.dates[W:]), assets=tuple(returns.assets),
                          rebalance_dates=tuple(reb_dates), weights_history=np.array(hist),
                          oos_returns=oos, turnover_series=np.array(turns), diagnostics=diag)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridResult:
    lambda1: tuple
    lambda2: tuple
    sharpe: np.ndarray                 # len(lambda1) x len(lambda2), NaN for invalid cells
    valid: np.ndarray
    errors: dict
    best: Optional[tuple]              # (lambda1, lambda2, sharpe)
    baseline_name: str
    baseline_sharpe: Optional[float]

    @property
    def delta(self):
        base = np.nan if self.baseline_sharpe is None else self.baseline_sharpe
        return self.sharpe - base

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda1", "lambda2", "sharpe", "delta_vs_baseline"])
        d = self.delta
        for i, l1 in enumerate(self.lambda1):
            for j, l2 in enumerate(self.lambda2):
                w.writerow([fmt_float(l1), fmt_float(l2), fmt_float(self.sharpe[i, j]), fmt_float(d[i, j])])
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text

    def to_dict(self):
        return {"lambda1": list(self.lambda1), "lambda2": list(self.lambda2), "sharpe": self.sharpe,
                "valid": self.valid, "errors": self.errors, "best": self.best,
                "baseline": {"name": self.baseline_name, "sharpe": self.baseline_sharpe}}


_WORKER = {}


def _init_worker(returns, chars, cfg, estimates):
    _WORKER.update(returns=returns, chars=chars, cfg=cfg, estimates=estimates)


def _cell(l1, l2, returns=None, chars=None, cfg=None, estimates=None):
    if returns is None:
        returns, chars, cfg, estimates = (_WORKER[k] for k in ("returns", "chars", "cfg", "estimates"))
    tmpl = replace(cfg.spec_template, regularization=Regularization(float(l1), float(l2)))
    try:
        res = run_backtest(returns, chars, replace(cfg, spec_template=tmpl), estimates)
        s = res.sharpe(cfg.periods_per_year)
        return (np.nan if s is None else s), None
    except PortQPError as exc:
        return np.nan, f"{type(exc).__name__}: {exc}"


def _thread_env(n):
    return {k: str(n) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                                "NUMBA_NUM_THREADS")}


def grid_search(returns: ReturnsPanel, chars: Optional[CharacteristicsPanel], config: BacktestConfig,
                n_jobs: int = 1, baseline: Optional[BacktestConfig] = None, baseline_name: str = "Sample",
                estimates: Optional[dict] = None) -> GridResult:
    """One backtest per (lambda1, lambda2) cell.

    Per-window estimates are computed once and shared by all cells. The
    baseline defaults to the unregularized sample-covariance backtest with
    the same template and windows.
    """
    l1s = tuple(DEFAULT_LAMBDA1 if config.lambda1_grid is None else config.lambda1_grid)
    l2s = tuple(DEFAULT_LAMBDA2 if config.lambda2_grid is None else config.lambda2_grid)
    if not l1s or not l2s:
        raise PortQPError("lambda grids must be nonempty")
    if estimates is None:
        estimates = estimate_all_windows(returns, chars, config)
    cells = [(i, j, l1, l2) for i, l1 in enumerate(l1s) for j, l2 in enumerate(l2s)]
    if n_jobs > 1:
        threads = os.environ.get(THREADS_ENV, "1")
        saved = {k: os.environ.get(k) for k in _thread_env(threads)}
        os.environ.update(_thread_env(threads))
        try:
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(n_jobs, mp_context=ctx, initializer=_init_worker,
                                     initargs=(returns, chars, config, estimates)) as ex:
                out = list(ex.map(_cell, [c[2] for c in cells], [c[3] for c in cells]))
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    else:
        out = [_cell(l1, l2, returns, chars, config, estimates) for _, _, l1, l2 in cells]
    sharpe = np.full((len(l1s), len(l2s)), np.nan)
    errors = {}
    for (i, j, l1, l2), (s, err) in zip(cells, out):
        sharpe[i, j] = s
        if err is not None:
            errors[f"{l1!r},{l2!r}"] = err
    valid = np.isfinite(sharpe)
    best = None
    if valid.any():
        i, j = np.unravel_index(np.nanargmax(sharpe), sharpe.shape)
        best = (l1s[i], l2s[j], float(sharpe[i, j]))
    if baseline is None:
        tmpl = replace(config.spec_template, regularization=Regularization(0.0, 0.0))
        baseline = replace(config, estimator="Sample", estimator_params={}, spec_template=tmpl)
    base_est = estimates if _same_estimator(baseline, config) else None
    try:
        base_sharpe = run_backtest(returns, chars, baseline, base_est).sharpe(config.periods_per_year)
    except PortQPError:
        base_sharpe = None
    return GridResult(l1s, l2s, sharpe, valid, errors, best, baseline_name, base_sharpe)


def _same_estimator(a, b):
    keys = ("window_length", "rebalance_every", "estimator", "universe_rule", "repair_floor")
    return (all(getattr(a, k) == getattr(b, k) for k in keys) and a.estimator_params == b.estimator_params
            and a.membership is None and b.membership is None)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_backtest_outputs(result: BacktestResult, outdir, prefix=""):
    os.makedirs(outdir, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "portfolio_return"])
    for d, r in zip(result.dates, result.oos_returns):
        w.writerow([d, fmt_float(r)])
    paths = {"returns": os.path.join(outdir, f"{prefix}returns.csv"),
             "weights": os.path.join(outdir, f"{prefix}weights.csv"),
             "diagnostics": os.path.join(outdir, f"{prefix}diagnostics.json")}
    atomic_write_text(paths["returns"], buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "asset_id", "weight"])
    for d, row in zip(result.rebalance_dates, result.weights_history):
        for a, v in zip(result.assets, row):
            if v != 0.0:
                w.writerow([d, a, fmt_float(v)])
    atomic_write_text(paths["weights"], buf.getvalue())
    diag = dict(result.diagnostics)
    diag["turnover"] = dict(zip(result.rebalance_dates, result.turnover_series.tolist()))
    diag["n_oos_periods"] = len(result.oos_returns)
    write_json(paths["diagnostics"], diag)
    return paths
