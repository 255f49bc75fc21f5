"""Numba kernels vs their numpy twins.

Kernel timings call both twins directly in this process. The end-to-end
figure runs one N-asset long-short max-Sharpe solve in two subprocesses,
one with PORTQP_DISABLE_NUMBA=1.

    python benchmarks/bench_kernels.py [--repeat 5] [--n 200]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from portqp import kernels
from portqp.portfolio import build_qp
from portqp.qp import HIGH, _Workspace


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, rng):
    A = rng.standard_normal((n, n))
    cov = A @ A.T / n + np.eye(n)
    b = np.full(n, 1.0 / n)
    r = rng.normal(0.005, 0.04, 5000)
    T, L, K = 360, 20, 4
    W = np.einsum("tij,tkj->tik", *(2 * [rng.standard_normal((T, L, 50))]))
    X = rng.standard_normal((T, L))
    G = np.linalg.qr(rng.standard_normal((L, K)))[0]
    F = rng.standard_normal((T, K))
    return {
        "erc_ccd": (lambda: kernels.erc_ccd_nb(cov, b, np.full(n, 1.0 / n), 1e-12, 10_000),
                    lambda: kernels.erc_ccd_np(cov, b, np.full(n, 1.0 / n), 1e-12, 10_000)),
        "underwater": (lambda: kernels.underwater_nb(r), lambda: kernels.underwater_np(r)),
        "ipca_factors": (lambda: kernels.ipca_factors_nb(W, X, G, 1e-10),
                         lambda: kernels.ipca_factors_np(W, X, G, 1e-10)),
        "ipca_gamma_system": (lambda: kernels.ipca_gamma_system_nb(W, X, F),
                              lambda: kernels.ipca_gamma_system_np(W, X, F)),
    }


def admm_case(n, rng):
    from portqp.backtest import paper_long_short_template

    A = rng.standard_normal((2 * n, n)) * 0.05
    cov = A.T @ A / (2 * n) + 1e-4 * np.eye(n)
    mu = rng.normal(0.01, 0.005, n)
    cap = max(0.08, 2.0 / n)
    spec = paper_long_short_template(lower=-cap, upper=cap, l1=1e-4, l2=1e-2).instantiate(cov, mu)
    ws = _Workspace(build_qp(spec).qp, HIGH)
    steps = 500

    def run(use_nb):
        x, z, y = np.zeros(ws.P.shape[0]), np.zeros(ws.A.shape[0]), np.zeros(ws.A.shape[0])
        s = ws.settings
        if use_nb:
            f = ws.factor
            P, Ac, At = ws.Pcsr, ws.Acsr, ws.Atcsr
            kernels.admm_iterate_nb(f.Lp, f.Li, f.Lx, f.Dinv, f.perm,
                                    P.indptr.astype(np.int64), P.indices.astype(np.int64), P.data,
                                    Ac.indptr.astype(np.int64), Ac.indices.astype(np.int64), Ac.data,
                                    At.indptr.astype(np.int64), At.indices.astype(np.int64), At.data,
                                    ws.q, ws.l, ws.u, ws.rho, s.sigma, s.alpha, ws.D, ws.E, 1.0 / ws.c,
                                    1e-30, 1e-30, 0.0, 0.0, x, z, y, 0, steps, steps + 1)
        else:
            kernels.admm_iterate_np(ws.factor.solve, ws.Pcsr, ws.Acsr, ws.q, ws.l, ws.u, ws.rho,
                                    s.sigma, s.alpha, ws.D, ws.E, 1.0 / ws.c, 1e-30, 1e-30, 0.0, 0.0,
                                    x, z, y, 0, steps, steps + 1)

    return lambda: run(True), lambda: run(False)


END_TO_END = """
import time, numpy as np
from portqp.backtest import paper_long_short_template
from portqp.portfolio import solve_portfolio
rng = np.random.default_rng(1)
n = {n}
A = rng.standard_normal((2 * n, n)) * 0.05
cov = A.T @ A / (2 * n) + 1e-4 * np.eye(n)
mu = rng.normal(0.01, 0.005, n)
cap = max(0.08, 2.0 / n)
spec = paper_long_short_template(lower=-cap, upper=cap, l1=1e-4, l2=1e-2).instantiate(cov, mu)
solve_portfolio(spec)
t0 = time.perf_counter(); w, sol, _ = solve_portfolio(spec); t = time.perf_counter() - t0
print(t, sol.iterations)
"""


def end_to_end(n, disable):
    env = dict(os.environ)
    if disable:
        env["PORTQP_DISABLE_NUMBA"] = "1"
    else:
        env.pop("PORTQP_DISABLE_NUMBA", None)
    out = subprocess.run([sys.executable, "-c", END_TO_END.format(n=n)], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return float(out[0]), int(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.n, rng)
    cases["admm_iterate(500 steps)"] = admm_case(args.n, rng)
    rows = []
    print(f"{'kernel':28s} {'numba [ms]':>12s} {'numpy [ms]':>12s} {'speedup':>8s}")
    for name, (nb, np_) in cases.items():
        t_nb, t_np = best_of(nb, args.repeat), best_of(np_, args.repeat)
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np})
        print(f"{name:28s} {1e3 * t_nb:12.3f} {1e3 * t_np:12.3f} {t_np / t_nb:8.1f}x")
    t_nb, it_nb = end_to_end(args.n, False)
    t_np, it_np = end_to_end(args.n, True)
    rows.append({"kernel": "solve_portfolio", "numba_s": t_nb, "numpy_s": t_np,
                 "iterations": [it_nb, it_np]})
    print(f"{'solve_portfolio (N=%d)' % args.n:28s} {1e3 * t_nb:12.3f} {1e3 * t_np:12.3f} {t_np / t_nb:8.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
