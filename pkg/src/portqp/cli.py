"""``portqp`` command line.

Exit codes: 0 success, 1 runtime failure (error JSON on stderr), 2 usage error.
Every command writes ``resolved_config.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

import numpy as np

from . import _accel
from . import covariance as cv
from ._io import atomic_write_text, fmt_float, to_jsonable, write_json
from .errors import PortQPError

BENCH_PROBLEMS = ("minvar-longonly", "maxsharpe-longonly", "maxsharpe-l1l2")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _load_blocks(args):
    from .data_io import CONFIG_BLOCKS, load_config

    if getattr(args, "config", None):
        blocks = load_config(args.config)
        base = os.path.dirname(os.path.abspath(args.config))
        for key in ("returns", "chars", "cov", "mu", "benchmark"):
            v = blocks["data"].get(key)
            if isinstance(v, str) and not os.path.isabs(v):
                blocks["data"][key] = os.path.join(base, v)
        return blocks
    return {k: {} for k in CONFIG_BLOCKS}


def _set(block, key, value):
    if value is not None:
        block[key] = value


def _resolve(args):
    b = _load_blocks(args)
    d, e, p, bt, o = (b[k] for k in ("data", "estimator", "portfolio", "backtest", "output"))
    _set(d, "returns", getattr(args, "returns", None))
    _set(d, "chars", getattr(args, "chars", None))
    _set(d, "cov", getattr(args, "cov", None))
    _set(d, "benchmark", getattr(args, "benchmark", None))
    _set(e, "name", getattr(args, "estimator", None))
    _set(e, "method", getattr(args, "qis_method", None))
    _set(e, "K", getattr(args, "k", None))
    _set(o, "dir", getattr(args, "out", None))
    if hasattr(args, "objective"):
        obj = dict(p.get("objective") or {})
        _set(obj, "kind", args.objective)
        _set(obj, "target", args.target)
        _set(obj, "rf", args.rf)
        if obj:
            p["objective"] = obj
        c = dict(p.get("constraints") or {})
        if args.long_only:
            c["long_only"] = True
        if args.box is not None:
            c["box"] = {"lower": args.box[0], "upper": args.box[1]}
        _set(c, "long_short", args.long_short)
        if c:
            c.setdefault("budget", True)
            p["constraints"] = c
        reg = dict(p.get("regularization") or {})
        _set(reg, "l1", args.l1)
        _set(reg, "l2", args.l2)
        if reg:
            p["regularization"] = reg
        _set(p, "precision", args.precision)
    for key in ("window_length", "rebalance_every", "universe_rule", "n_jobs"):
        _set(bt, key, getattr(args, key, None))
    for key in ("lambda1_grid", "lambda2_grid"):
        v = getattr(args, key, None)
        if v is not None:
            bt[key] = v
    if not o.get("dir"):
        raise UsageError("an output directory is required (--out or output.dir)")
    return b


def _write_resolved(outdir, command, blocks, extra=None):
    rec = {"command": command, **blocks}
    if extra:
        rec.update(extra)
    write_json(os.path.join(outdir, "resolved_config.json"), rec)


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


def _returns(data, required=True):
    from .data_io import load_returns_csv

    path = data.get("returns")
    if not path:
        if required:
            raise UsageError("a returns panel is required (--returns or data.returns)")
        return None
    return load_returns_csv(path, log_returns=bool(data.get("log_returns", False)))


def _chars(data):
    from .data_io import load_characteristics_csv

    path = data.get("chars")
    return None if not path else load_characteristics_csv(path, strict=bool(data.get("strict", True)))


def _complete_rows(panel):
    rows = panel.mask.all(axis=1)
    if not rows.any():
        raise PortQPError("no date has returns for every asset")
    return panel.values[rows]


def _estimate(panel, chars, est_block):
    name = est_block.get("name", "Sample")
    if name == "Sample":
        return cv.sample_cov(_complete_rows(panel))
    if name == "LinearShrinkage":
        return cv.linear_shrinkage(_complete_rows(panel))
    if name == "QIS":
        return cv.qis_shrinkage(_complete_rows(panel), method=est_block.get("method", "analytical"))
    if name == "IPCA":
        from .ipca import fit_ipca, ipca_covariance

        if chars is None:
            raise UsageError("the IPCA estimator needs a characteristics panel (--chars)")
        model = fit_ipca(panel, chars, int(est_block.get("K", 3)),
                         rank_chars=bool(est_block.get("rank_chars", False)))
        return ipca_covariance(model, np.nan_to_num(chars.Z[-1]))
    raise UsageError(f"unknown estimator {name!r}; expected one of {cv.ESTIMATORS}")


def _cov_mu(blocks):
    """Covariance, mean and asset labels from data.cov / data.mu or a returns panel."""
    d = blocks["data"]
    cov_src, mu_src = d.get("cov"), d.get("mu")
    assets = d.get("assets")
    panel = None
    if isinstance(cov_src, str):
        est, ids = cv.CovarianceEstimate.from_csv(cov_src)
        cov = est.matrix
        assets = assets or ids
    elif cov_src is not None:
        cov = np.array(cov_src, dtype=float)
    else:
        panel = _returns(d)
        cov = _estimate(panel, _chars(d), blocks["estimator"]).matrix
        assets = assets or list(panel.assets)
    if isinstance(mu_src, str):
        mu = _read_vector(mu_src, assets)
    elif mu_src is not None:
        mu = np.array(mu_src, dtype=float)
    elif panel is not None:
        mu = np.nanmean(panel.values, axis=0)
    elif d.get("returns"):
        mu = np.nanmean(_returns(d).values, axis=0)
    else:
        mu = None
    assets = list(assets) if assets else [f"a{i}" for i in range(cov.shape[0])]
    return cov, mu, assets


def _read_vector(path, assets=None):
    """Two-column CSV (asset_id, value), reordered to ``assets`` when given."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r][1:]
    vals = {r[0]: float(r[1]) for r in rows}
    if assets is None:
        return np.array([float(r[1]) for r in rows])
    missing = [a for a in assets if a not in vals]
    if missing:
        raise PortQPError(f"{path}: no value for assets {missing[:5]}")
    return np.array([vals[a] for a in assets])


def _spec(blocks, cov, mu):
    from .portfolio import spec_from_dict

    p = blocks["portfolio"]
    d = {"objective": p.get("objective", {"kind": "MinVariance"}),
         "constraints": p.get("constraints", {"budget": True}),
         "regularization": p.get("regularization", {})}
    return spec_from_dict(d, cov=cov, mu=mu)


def _settings(blocks):
    from .qp import PRESETS

    name = blocks["portfolio"].get("precision", "high")
    if name not in PRESETS:
        raise UsageError(f"unknown precision {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name]


def _backtest_config(blocks):
    from .backtest import BacktestConfig, SpecTemplate, paper_long_short_template

    bt = dict(blocks["backtest"])
    bt.pop("n_jobs", None)
    est = dict(blocks["estimator"])
    name = est.pop("name", "Sample")
    p = blocks["portfolio"]
    if p.get("objective") or p.get("constraints"):
        tmpl = SpecTemplate.from_dict({"objective": p.get("objective", {"kind": "MaxSharpe"}),
                                       "constraints": p.get("constraints", {"budget": True}),
                                       "regularization": p.get("regularization", {})})
    else:
        reg = p.get("regularization", {})
        tmpl = paper_long_short_template(l1=float(reg.get("l1", 0.0)), l2=float(reg.get("l2", 0.0)))
    bt.update(estimator=name, estimator_params=est, spec_template=tmpl,
              precision=p.get("precision", "high"))
    return BacktestConfig(**_bt_kwargs(bt))


def _bt_kwargs(bt):
    from .backtest import BacktestConfig

    known = set(BacktestConfig.__dataclass_fields__)
    unknown = set(bt) - known
    if unknown:
        raise UsageError(f"unknown backtest settings: {sorted(unknown)}")
    for k in ("lambda1_grid", "lambda2_grid"):
        if bt.get(k) is not None:
            bt[k] = tuple(float(v) for v in bt[k])
    return bt


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_cov(args):
    blocks = _resolve(args)
    out = blocks["output"]["dir"]
    panel = _returns(blocks["data"])
    est = _estimate(panel, _chars(blocks["data"]), blocks["estimator"])
    est.to_csv(os.path.join(out, "cov.csv"), panel.assets, os.path.join(out, "cov_diagnostics.json"))
    _write_resolved(out, "cov", blocks)


def cmd_optimize(args):
    from .data_io import write_weights_csv
    from .portfolio import solve_portfolio

    blocks = _resolve(args)
    out = blocks["output"]["dir"]
    cov, mu, assets = _cov_mu(blocks)
    spec = _spec(blocks, cov, mu)
    w, sol, _ = solve_portfolio(spec, _settings(blocks))
    write_weights_csv(os.path.join(out, "weights.csv"), assets, w)
    info = {"variance": float(w @ spec.cov @ w)}
    if spec.mu is not None:
        info["expected_return"] = float(w @ spec.mu)
    if sol is not None:
        info.update(status=sol.status.value, iterations=sol.iterations, objective=sol.objective,
                    prim_res=sol.prim_res, dual_res=sol.dual_res, polished=sol.polished)
    write_json(os.path.join(out, "solution.json"), info)
    _write_resolved(out, "optimize", blocks)


def cmd_frontier(args):
    import csv
    import io

    from .portfolio import efficient_frontier, frontier_targets

    blocks = _resolve(args)
    out = blocks["output"]["dir"]
    cov, mu, assets = _cov_mu(blocks)
    if mu is None:
        raise UsageError("the frontier needs expected returns (data.mu or a returns panel)")
    spec = _spec(blocks, cov, mu)
    targets = args.targets if args.targets else frontier_targets(spec, args.points)
    pts = efficient_frontier(spec, targets, _settings(blocks))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "expected_return", "volatility", "status"] + list(assets))
    for p in pts:
        ws = [""] * len(assets) if p.weights is None else [fmt_float(v) for v in p.weights]
        w.writerow([fmt_float(p.target), fmt_float(p.mean), fmt_float(p.stdev),
                    p.status if p.feasible else "Infeasible"] + ws)
    atomic_write_text(os.path.join(out, "frontier.csv"), buf.getvalue())
    _write_resolved(out, "frontier", blocks, {"targets": list(targets)})


def cmd_ipca_fit(args):
    import csv
    import io

    from .ipca import fit_ipca, ipca_total_r2

    blocks = _resolve(args)
    out = blocks["output"]["dir"]
    panel = _returns(blocks["data"])
    chars = _chars(blocks["data"])
    if chars is None:
        raise UsageError("ipca-fit needs a characteristics panel (--chars)")
    e = blocks["estimator"]
    model = fit_ipca(panel, chars, int(e.get("K", 3)), tol=float(e.get("tol", 1e-9)),
                     max_sweeps=int(e.get("max_sweeps", 500)), rank_chars=bool(e.get("rank_chars", False)))
    rec = model.to_dict()
    rec["characteristics"] = list(chars.names)
    rec["total_r2"] = ipca_total_r2(model, panel, chars) if not e.get("rank_chars") else None
    write_json(os.path.join(out, "ipca_model.json"), rec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date"] + [f"f{k + 1}" for k in range(model.K)])
    for d, f in zip(panel.dates[1:], model.factors.T):
        w.writerow([d] + [fmt_float(v) for v in f])
    atomic_write_text(os.path.join(out, "factors.csv"), buf.getvalue())
    _write_resolved(out, "ipca-fit", blocks)


def cmd_backtest(args):
    from .backtest import run_backtest, write_backtest_outputs
    from .metrics import metrics_table_csv

    blocks = _resolve(args)
    out = blocks["output"]["dir"]
    panel = _returns(blocks["data"])
    cfg = _backtest_config(blocks)
    res = run_backtest(panel, _chars(blocks["data"]), cfg)
    write_backtest_outputs(res, out)
    rep = res.metrics(periods_per_year=cfg.periods_per_year)
    write_json(os.path.join(out, "metrics.json"), rep.to_dict())
    metrics_table_csv({cfg.estimator: rep}, os.path.join(out, "metrics.csv"))
    _write_resolved(out, "backtest", blocks, {"backtest_config": cfg.to_dict()})


def cmd_grid(args):
    from .backtest import grid_search

    blocks = _resolve(args)
    out = blocks["output"]["dir"]
    panel = _returns(blocks["data"])
    cfg = _backtest_config(blocks)
    n_jobs = int(blocks["backtest"].get("n_jobs", 1))
    g = grid_search(panel, _chars(blocks["data"]), cfg, n_jobs=n_jobs)
    g.to_csv(os.path.join(out, "heatmap.csv"))
    write_json(os.path.join(out, "grid.json"), g.to_dict())
    _write_resolved(out, "grid", blocks, {"backtest_config": cfg.to_dict()})


def cmd_synth(args):
    from .data_io import gen_synthetic_panel, write_characteristics_csv, write_returns_csv, write_truth_json

    out = args.out
    R, C, truth = gen_synthetic_panel(args.n, args.t, args.l, args.k, args.noise, args.seed)
    write_returns_csv(R, os.path.join(out, "returns.csv"))
    write_characteristics_csv(C, os.path.join(out, "chars.csv"))
    write_truth_json(truth, os.path.join(out, "truth.json"))
    _write_resolved(out, "synth", {"data": {"N": args.n, "T": args.t, "L": args.l, "K": args.k,
                                            "noise_scale": args.noise, "seed": args.seed},
                                   "output": {"dir": out}})


def _read_series(path):
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0][0] != "date":
        raise PortQPError(f"{path}: expected a (date, value) CSV")
    dates = [r[0] for r in rows[1:]]
    vals = np.array([float(r[1]) for r in rows[1:]])
    return dates, vals


def cmd_report(args):
    from . import metrics as mt

    out = args.out
    strategies = {}
    for item in args.strategy:
        if "=" not in item:
            raise UsageError(f"--strategy expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        if name in strategies:
            raise UsageError(f"duplicate strategy name {name!r}")
        strategies[name] = _read_series(path)
    bench = None
    if args.benchmark:
        bdates, bvals = _read_series(args.benchmark)
    reports = {}
    ppy = args.periods_per_year
    for name, (dates, vals) in strategies.items():
        if args.benchmark:
            if list(bdates) != list(dates):
                raise PortQPError(f"benchmark dates do not match strategy {name!r}")
            bench = bvals
        reports[name] = mt.compute_metrics(vals, bench, ppy)
    mt.metrics_table_csv(reports, os.path.join(out, "metrics.csv"))
    write_json(os.path.join(out, "metrics.json"), {k: r.to_dict() for k, r in reports.items()})
    for name, (dates, vals) in strategies.items():
        pre = f"{name}_" if len(strategies) > 1 else ""
        mt.write_series_csv(os.path.join(out, f"{pre}cumulative_returns.csv"), dates,
                            {"cumulative_return": mt.cumulative_returns(vals)})
        eoy = mt.end_of_year_returns(vals, dates)
        mt.write_series_csv(os.path.join(out, f"{pre}eoy_returns.csv"), list(eoy),
                            {"return": list(eoy.values())})
        mt.write_series_csv(os.path.join(out, f"{pre}rolling_sharpe.csv"), dates,
                            {"sharpe_6m": mt.rolling_sharpe(vals, 6, ppy)})
        mt.write_series_csv(os.path.join(out, f"{pre}rolling_volatility.csv"), dates,
                            {"volatility_6m": mt.rolling_volatility(vals, 6, ppy)})
        if bench is not None:
            mt.write_series_csv(os.path.join(out, f"{pre}rolling_beta.csv"), dates,
                                {"beta_6m": mt.rolling_beta(vals, bench, 6),
                                 "beta_12m": mt.rolling_beta(vals, bench, 12)})
        mt.write_series_csv(os.path.join(out, f"{pre}underwater.csv"), dates,
                            {"underwater": mt.underwater_curve(vals)})
    _write_resolved(out, "report", {"data": {"strategies": {k: v for k, v in
                                                            (s.split("=", 1) for s in args.strategy)},
                                             "benchmark": args.benchmark},
                                    "metrics": {"periods_per_year": ppy}, "output": {"dir": out}})


def bench_template(problem, n, l1=1e-4, l2=1e-2):
    from .backtest import SpecTemplate, paper_long_short_template
    from .portfolio import MaxSharpe, MinVariance

    if problem == "minvar-longonly":
        return SpecTemplate(MinVariance(), {"budget": True, "long_only": True})
    if problem == "maxsharpe-longonly":
        return SpecTemplate(MaxSharpe(0.0), {"budget": True, "long_only": True})
    if problem == "maxsharpe-l1l2":
        # +-0.08 boxes cannot hold a fully invested book below 13 assets
        cap = max(0.08, 2.0 / n)
        return paper_long_short_template(lower=-cap, upper=cap, l1=l1, l2=l2)
    raise UsageError(f"unknown bench problem {problem!r}; expected one of {BENCH_PROBLEMS}")


def run_bench(n, problem, windows, precision, window_length=360, seed=0, l1=1e-4, l2=1e-2):
    """Time ``windows`` rebalances of one problem class on a synthetic panel."""
    from .backtest import BacktestConfig, estimate_all_windows, run_backtest
    from .data_io import gen_synthetic_panel

    R, _, _ = gen_synthetic_panel(n, window_length + windows, 6, 3, 0.05, seed)
    cfg = BacktestConfig(window_length=window_length, estimator="Sample",
                         spec_template=bench_template(problem, n, l1, l2), precision=precision)
    t0 = time.perf_counter()
    est = estimate_all_windows(R, None, cfg)
    t1 = time.perf_counter()
    res = run_backtest(R, None, cfg, est)
    t2 = time.perf_counter()
    statuses = res.diagnostics["statuses"]
    return {"problem": problem, "n_assets": n, "windows": windows, "precision": precision,
            "window_length": window_length, "estimation_seconds": t1 - t0,
            "optimization_seconds": t2 - t1, "total_seconds": t2 - t0,
            "solved": sum(s == "Solved" for s in statuses), "failures": res.diagnostics["n_failures"]}


def cmd_bench(args):
    out = args.out
    problems = BENCH_PROBLEMS if args.problem == "all" else (args.problem,)
    precisions = ("default", "high") if args.precision == "both" else (args.precision,)
    results = []
    for problem in problems:
        for n in args.n:
            for prec in precisions:
                results.append(run_bench(n, problem, args.windows, prec, args.window_length, args.seed))
    rec = {"backend": _accel.backend(), "python": platform.python_version(),
           "machine": platform.machine(), "results": results}
    write_json(os.path.join(out, "bench.json"), rec)
    _write_resolved(out, "bench", {"bench": {"n": args.n, "problem": args.problem, "windows": args.windows,
                                             "precision": args.precision, "window_length": args.window_length,
                                             "seed": args.seed},
                                   "output": {"dir": out}})


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_data(p, chars=True):
    p.add_argument("--config", help="JSON config with blocks data/estimator/portfolio/backtest/output")
    p.add_argument("--returns", help="wide returns CSV (date, asset columns)")
    if chars:
        p.add_argument("--chars", help="long characteristics CSV (date, asset_id, characteristic, value)")
    p.add_argument("--out", help="output directory")


def _add_estimator(p):
    p.add_argument("--estimator", choices=cv.ESTIMATORS)
    p.add_argument("--qis-method", choices=("analytical", "quadratic_inverse"))
    p.add_argument("--k", type=int, help="IPCA factor count")


def _add_portfolio(p):
    p.add_argument("--objective", choices=("MinVariance", "MeanVariance", "MaxSharpe"))
    p.add_argument("--target", type=float, help="MeanVariance target return")
    p.add_argument("--rf", type=float, help="MaxSharpe risk-free rate")
    p.add_argument("--long-only", action="store_true")
    p.add_argument("--box", type=float, nargs=2, metavar=("LOWER", "UPPER"))
    p.add_argument("--long-short", type=float, metavar="THETA")
    p.add_argument("--l1", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--precision", choices=("default", "high"))


def _add_backtest(p):
    p.add_argument("--window-length", type=int)
    p.add_argument("--rebalance-every", type=int)
    p.add_argument("--universe-rule", choices=("FullHistoryOnly", "MembershipMask"))


def build_parser():
    ap = _Parser(prog="portqp", description="Regularized portfolio optimization via ADMM QP.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("cov", help="estimate a covariance matrix")
    _add_data(p)
    _add_estimator(p)
    p.set_defaults(func=cmd_cov)

    p = sub.add_parser("optimize", help="solve one portfolio problem")
    _add_data(p)
    p.add_argument("--cov", help="covariance CSV written by `cov`")
    _add_estimator(p)
    _add_portfolio(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("frontier", help="trace the efficient frontier")
    _add_data(p)
    p.add_argument("--cov", help="covariance CSV written by `cov`")
    _add_estimator(p)
    _add_portfolio(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--targets", type=float, nargs="+")
    g.add_argument("--points", type=int, default=20)
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("ipca-fit", help="fit an IPCA model")
    _add_data(p)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_ipca_fit)

    for name, func, help_ in (("backtest", cmd_backtest, "rolling-window backtest"),
                              ("grid", cmd_grid, "regularization grid search")):
        p = sub.add_parser(name, help=help_)
        _add_data(p)
        _add_estimator(p)
        _add_portfolio(p)
        _add_backtest(p)
        if name == "grid":
            p.add_argument("--lambda1-grid", type=float, nargs="+")
            p.add_argument("--lambda2-grid", type=float, nargs="+")
            p.add_argument("--n-jobs", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="generate a synthetic factor panel")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="metric table and plot-ready series")
    p.add_argument("--strategy", action="append", required=True, metavar="NAME=PATH",
                   help="return series CSV (date, return); repeatable")
    p.add_argument("--benchmark", help="benchmark return series CSV")
    p.add_argument("--periods-per-year", type=int, default=12)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="timing of the three benchmark problem classes")
    p.add_argument("--n", type=int, nargs="+", default=[10, 20, 50, 500])
    p.add_argument("--problem", choices=BENCH_PROBLEMS + ("all",), default="all")
    p.add_argument("--windows", type=int, default=100)
    p.add_argument("--window-length", type=int, default=360)
    p.add_argument("--precision", choices=("default", "high", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def _fail(code, kind, message):
    sys.stderr.write(json.dumps(to_jsonable({"error": kind, "message": message, "exit_code": code})) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "out", None):
            os.makedirs(args.out, exist_ok=True)
        args.func(args)
    except UsageError as exc:
        return _fail(2, "UsageError", str(exc))
    except PortQPError as exc:
        return _fail(1, getattr(exc, "code", type(exc).__name__), str(exc))
    except (OSError, ValueError, KeyError) as exc:
        return _fail(1, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
