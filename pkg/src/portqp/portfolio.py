"""Portfolio problems and their reformulation as standard-form QPs.

Objectives (``x'Sx`` is the portfolio variance):

* ``MinVariance``   min  w'Sw + l1 |w|_1 + l2 |w|_2^2
* ``MeanVariance``  same, subject to w'mu >= target
* ``MaxSharpe``     max (w'mu - rf) / sqrt(w'Sw), solved through the
  homogenized variables (w~, gamma) with w~ = gamma w and
  w~'(mu - rf) = 1, so the problem is again a QP in w~.

The l2 penalty is folded into the covariance by shifting its spectrum; the l1
penalty, the long-short gross limits and every absolute-value constraint use
nonnegative split variables. All constraints are first written as ranged rows
``lo <= a'v <= hi`` over the unhomogenized variable vector; for MaxSharpe each
row is rewritten as ``a'v~ - lo*gamma >= 0`` / ``a'v~ - hi*gamma <= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import kernels
from .errors import (ConvergenceError, DimensionError, InfeasibleError, NotPSDError,
                     PortQPError, RecoveryError, SingularMatrixError)
from .qp import HIGH, QPProblem, QPSettings, QPSolution, Status, solve_qp

EIG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MinVariance:
    kind = "MinVariance"


@dataclass(frozen=True)
class MeanVariance:
    target: float
    kind = "MeanVariance"

    def __post_init__(self):
        if not np.isfinite(self.target):
            raise PortQPError("MeanVariance target must be finite")


@dataclass(frozen=True)
class MaxSharpe:
    rf: float = 0.0
    kind = "MaxSharpe"


Objective = Union[MinVariance, MeanVariance, MaxSharpe]


@dataclass(frozen=True)
class FactorExposure:
    """Exposure rows on ``loadings`` (N x K); ``bounds=None`` neutralizes every factor."""

    loadings: np.ndarray
    bounds: Optional[np.ndarray] = None


def _vec(v, n=None, name="vector"):
    a = np.asarray(v, dtype=float).reshape(-1)
    if n is not None and a.size != n:
        raise DimensionError(f"{name} has {a.size} entries, expected {n}")
    return a


@dataclass(frozen=True)
class ConstraintSet:
    budget: bool = True
    long_only: bool = False
    box: Optional[tuple] = None                  # (L, U)
    long_short: Optional[float] = None           # theta
    turnover_individual: Optional[tuple] = None  # (w_prev, U)
    turnover_total: Optional[tuple] = None       # (w_prev, U_star)
    benchmark_l1: Optional[tuple] = None         # (w_B, U_B)
    factor_exposure: Optional[FactorExposure] = None
    linear_extra: Optional[tuple] = None         # (A_w, u_w): A_w w <= u_w
    tracking_error: Optional[tuple] = None       # (w_B, sigma_te^2)

    def __post_init__(self):
        if not self.budget:
            raise PortQPError("the budget constraint w'1 = 1 is always imposed")
        if self.box is not None:
            L, U = (np.asarray(b, dtype=float) for b in self.box)
            if np.any(L > U):
                raise PortQPError("box bounds require L <= U")
        if self.long_short is not None and self.long_short < 0:
            raise PortQPError("long-short theta must be >= 0")
        if self.turnover_total is not None and self.turnover_total[1] < 0:
            raise PortQPError("total turnover limit must be >= 0")
        if self.benchmark_l1 is not None and self.benchmark_l1[1] < 0:
            raise PortQPError("benchmark l1 bound must be >= 0")
        if self.tracking_error is not None and not self.tracking_error[1] > 0:
            raise PortQPError("tracking-error variance must be > 0")


@dataclass(frozen=True)
class Regularization:
    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.l1 < 0 or self.l2 < 0:
            raise PortQPError("regularization strengths must be nonnegative")


@dataclass(frozen=True, eq=False)
class PortfolioSpec:
    objective: Objective
    cov: np.ndarray
    mu: Optional[np.ndarray] = None
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    regularization: Regularization = field(default_factory=Regularization)

    def __post_init__(self):
        cov = np.array(self.cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise DimensionError(f"covariance must be square, got {cov.shape}")
        scale = max(np.max(np.abs(cov)), 1e-300)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10 * scale):
            raise PortQPError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)
        if self.mu is not None:
            mu = _vec(self.mu, cov.shape[0], "mu")
            mu.setflags(write=False)
            object.__setattr__(self, "mu", mu)
        elif not isinstance(self.objective, MinVariance):
            raise PortQPError(f"{self.objective.kind} requires mu")

    @property
    def n_assets(self):
        return self.cov.shape[0]


# ---------------------------------------------------------------------------
# Reformulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariableLayout:
    n_assets: int
    blocks: dict  # name -> slice into the QP variable vector
    homogenized: bool

    @property
    def split(self):
        return "w_plus" in self.blocks

    @property
    def n_vars(self):
        return max(s.stop for s in self.blocks.values())


@dataclass(frozen=True, eq=False)
class ReformulatedQP:
    qp: QPProblem
    layout: VariableLayout
    row_labels: tuple = ()

    def recover(self, sol):
        return recover_weights(self, sol)


class _Rows:
    """Ranged rows over named variable blocks."""

    def __init__(self, sizes):
        self.sizes = dict(sizes)
        self.mats, self.lo, self.hi, self.labels = [], [], [], []

    def add(self, label, coeffs, lo, hi):
        k = None
        for mat in coeffs.values():
            k = mat.shape[0]
        cols = []
        for name, size in self.sizes.items():
            mat = coeffs.get(name)
            cols.append(sp.csr_matrix(mat) if mat is not None else sp.csr_matrix((k, size)))
        self.mats.append(sp.hstack(cols, format="csr"))
        self.lo.append(np.broadcast_to(np.asarray(lo, dtype=float), (k,)).copy())
        self.hi.append(np.broadcast_to(np.asarray(hi, dtype=float), (k,)).copy())
        self.labels.extend([label] * k)

    def stack(self):
        n = sum(self.sizes.values())
        if not self.mats:
            return sp.csr_matrix((0, n)), np.zeros(0), np.zeros(0)
        return sp.vstack(self.mats, format="csr"), np.concatenate(self.lo), np.concatenate(self.hi)


def shifted_covariance(cov, l2):
    """Spectral shift P(Lambda + l2 I)P' with eigenvalues floored at EIG_FLOOR*max."""
    evals, evecs = np.linalg.eigh(cov)
    top = max(evals[-1], 0.0)
    floor = EIG_FLOOR * top
    if l2 == 0.0 and evals[0] >= floor:
        return np.array(cov)
    if top <= 0.0:
        raise NotPSDError("covariance has no positive eigenvalue")
    lam = np.maximum(evals, floor) + l2
    out = (evecs * lam) @ evecs.T
    return 0.5 * (out + out.T)


def _w_space_rows(spec: PortfolioSpec):
    """Constraint rows over the unhomogenized variables, plus the block sizes."""
    N = spec.n_assets
    cons = spec.constraints
    reg = spec.regularization
    split = reg.l1 > 0 or cons.long_short is not None
    sizes = {"w": N}
    if split:
        sizes["w_plus"] = N
        sizes["w_minus"] = N
    if cons.turnover_total is not None:
        sizes["to_plus"] = N
        sizes["to_minus"] = N
    if cons.benchmark_l1 is not None:
        sizes["bm_plus"] = N
        sizes["bm_minus"] = N
    I = sp.identity(N, format="csr")
    ones = sp.csr_matrix(np.ones((1, N)))
    rows = _Rows(sizes)

    rows.add("budget", {"w": ones}, 1.0, 1.0)

    lo = np.full(N, -np.inf)
    hi = np.full(N, np.inf)
    if cons.long_only:
        lo = np.maximum(lo, 0.0)
    if cons.box is not None:
        L, U = (_vec(b, N, "box bound") for b in cons.box)
        lo = np.maximum(lo, L)
        hi = np.minimum(hi, U)
    if np.any(lo > hi):
        raise InfeasibleError("box and long-only bounds are inconsistent")
    if np.any(np.isfinite(lo)) or np.any(np.isfinite(hi)):
        rows.add("bounds", {"w": I}, lo, hi)

    if split:
        rows.add("split", {"w": I, "w_plus": -I, "w_minus": I}, 0.0, 0.0)
        rows.add("split_nonneg", {"w_plus": I}, 0.0, np.inf)
        rows.add("split_nonneg", {"w_minus": I}, 0.0, np.inf)
        if cons.long_short is not None:
            theta = float(cons.long_short)
            rows.add("gross_long", {"w_plus": ones}, -np.inf, 1.0 + theta)
            rows.add("gross_short", {"w_minus": ones}, -np.inf, theta)

    if cons.turnover_individual is not None:
        w_prev, U = cons.turnover_individual
        w_prev = _vec(w_prev, N, "previous weights")
        U = np.broadcast_to(np.asarray(U, dtype=float), (N,))
        rows.add("turnover_individual", {"w": I}, w_prev - U, w_prev + U)

    if cons.turnover_total is not None:
        w_prev, ustar = cons.turnover_total
        w_prev = _vec(w_prev, N, "previous weights")
        rows.add("turnover_split", {"w": I, "to_plus": -I, "to_minus": I}, w_prev, w_prev)
        rows.add("turnover_nonneg", {"to_plus": I}, 0.0, np.inf)
        rows.add("turnover_nonneg", {"to_minus": I}, 0.0, np.inf)
        rows.add("turnover_total", {"to_plus": ones, "to_minus": ones}, -np.inf, float(ustar))

    if cons.benchmark_l1 is not None:
        w_b, ub = cons.benchmark_l1
        w_b = _vec(w_b, N, "benchmark weights")
        rows.add("benchmark_split", {"w": I, "bm_plus": -I, "bm_minus": I}, w_b, w_b)
        rows.add("benchmark_nonneg", {"bm_plus": I}, 0.0, np.inf)
        rows.add("benchmark_nonneg", {"bm_minus": I}, 0.0, np.inf)
        rows.add("benchmark_l1", {"bm_plus": ones, "bm_minus": ones}, -np.inf, float(ub))

    if cons.factor_exposure is not None:
        B = np.asarray(cons.factor_exposure.loadings, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != N:
            raise DimensionError(f"factor loadings have {B.shape[0]} rows, expected {N}")
        if cons.factor_exposure.bounds is None:
            rows.add("factor_neutral", {"w": B.T}, 0.0, 0.0)
        else:
            Uk = np.broadcast_to(np.asarray(cons.factor_exposure.bounds, dtype=float), (B.shape[1],))
            rows.add("factor_exposure", {"w": B.T}, -Uk, Uk)

    if cons.linear_extra is not None:
        Aw, uw = cons.linear_extra
        Aw = np.atleast_2d(np.asarray(Aw, dtype=float))
        if Aw.shape[1] != N:
            raise DimensionError(f"linear_extra has {Aw.shape[1]} columns, expected {N}")
        rows.add("linear_extra", {"w": Aw}, -np.inf, _vec(uw, Aw.shape[0], "u_w"))

    if isinstance(spec.objective, MeanVariance):
        rows.add("target_mean", {"w": sp.csr_matrix(spec.mu[None, :])}, spec.objective.target, np.inf)

    return sizes, rows


def _layout(sizes, homogenized, N):
    blocks = {}
    start = 0
    for name, size in sizes.items():
        blocks[name] = slice(start, start + size)
        start += size
    if homogenized:
        blocks["gamma"] = slice(start, start + 1)
    return VariableLayout(n_assets=N, blocks=blocks, homogenized=homogenized)


def max_excess_return(spec: PortfolioSpec):
    """LP optimum of w'(mu - rf) over the constraint set (``inf`` if unbounded)."""
    sizes, rows = _w_space_rows(spec)
    A, lo, hi = rows.stack()
    n = A.shape[1]
    c = np.zeros(n)
    c[: spec.n_assets] = -(spec.mu - spec.objective.rf)
    eq = lo == hi
    A_eq = A[eq] if eq.any() else None
    b_eq = lo[eq] if eq.any() else None
    ub_rows, b_ub = [], []
    upper = ~eq & np.isfinite(hi)
    lower = ~eq & np.isfinite(lo)
    if upper.any():
        ub_rows.append(A[upper])
        b_ub.append(hi[upper])
    if lower.any():
        ub_rows.append(-A[lower])
        b_ub.append(-lo[lower])
    A_ub = sp.vstack(ub_rows, format="csr") if ub_rows else None
    b_ub = np.concatenate(b_ub) if b_ub else None
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=(None, None),
                  method="highs")
    if res.status == 3:
        return np.inf
    if res.status == 2:
        raise InfeasibleError("the constraint set is empty")
    if res.status != 0:
        raise PortQPError(f"feasibility LP failed: {res.message}")
    return -res.fun


def _forces_long_only(cons: ConstraintSet, N):
    if cons.long_only or cons.long_short == 0.0:
        return True
    return cons.box is not None and bool(np.all(_vec(cons.box[0], N, "box bound") >= 0.0))


def build_qp(spec: PortfolioSpec, _te_penalty=None) -> ReformulatedQP:
    """Map a portfolio spec onto a standard-form QP (see module docstring)."""
    cons = spec.constraints
    if cons.tracking_error is not None and _te_penalty is None:
        raise PortQPError("tracking-error constraints are solved by solve_with_tracking_error")
    N = spec.n_assets
    reg = spec.regularization
    homogenized = isinstance(spec.objective, MaxSharpe)
    if homogenized:
        best = max_excess_return(spec)
        if not best > 1e-10:
            raise InfeasibleError(
                f"no feasible portfolio has positive excess return (max {best:.3e})")

    sizes, rows = _w_space_rows(spec)
    layout = _layout(sizes, homogenized, N)
    n = layout.n_vars
    A, lo, hi = rows.stack()
    labels = list(rows.labels)

    if homogenized:
        A = A.tocsr()
        eq = lo == hi
        lo_rows = np.flatnonzero(eq | (~eq & np.isfinite(lo)))
        hi_rows = np.flatnonzero(~eq & np.isfinite(hi))
        # row order: per original row, the lower part first, then the upper part
        order = np.argsort(np.concatenate([2 * lo_rows, 2 * hi_rows + 1]), kind="stable")
        src = np.concatenate([lo_rows, hi_rows])[order]
        shift = np.concatenate([lo[lo_rows], hi[hi_rows]])[order]
        is_eq = eq[src]
        is_lo = np.concatenate([np.ones(lo_rows.size, bool), np.zeros(hi_rows.size, bool)])[order]
        A_w = sp.hstack([A[src], sp.csr_matrix(-shift[:, None])], format="csr")
        mats = [A_w]
        los = list(np.where(is_eq | is_lo, 0.0, -np.inf))
        his = list(np.where(is_eq | ~is_lo, 0.0, np.inf))
        labs = [labels[i] for i in src]
        # Normalizing by the largest excess return keeps y = s w / (excess' w)
        # near unit scale; a row of tiny entries would escape equilibration and
        # produce huge iterates. The l1 costs are multiplied by s below so the
        # problem is exactly the unscaled one.
        excess = np.zeros(n)
        excess[layout.blocks["w"]] = spec.mu - spec.objective.rf
        norm_scale = float(np.max(np.abs(excess)))
        excess /= norm_scale
        gam = np.zeros(n)
        gam[-1] = 1.0
        mats += [sp.csr_matrix(excess[None, :]), sp.csr_matrix(gam[None, :])]
        los += [1.0, 0.0]
        his += [1.0, np.inf]
        labs += ["normalization", "gamma_nonneg"]
        A = sp.vstack(mats, format="csc")
        lo = np.array(los)
        hi = np.array(his)
        labels = labs

    cov_t = shifted_covariance(spec.cov, reg.l2)
    P = np.zeros((n, n))
    q = np.zeros(n)
    w = layout.blocks["w"]
    P[w, w] = 2.0 * cov_t
    if _te_penalty is not None:
        nu, w_b = _te_penalty
        P[w, w] += 2.0 * nu * spec.cov
        q[w] -= 2.0 * nu * spec.cov @ w_b
    if reg.l1 > 0:
        # On the feasible set 1'w+ - 1'w- = 1'w = 1 (gamma when homogenized), so
        # l1 (1'w+ + 1'w-) = l1 (1 + 2 1'w-). Charging only w- keeps the
        # budget multiplier at the scale of the variance gradient.
        cost = 2.0 * reg.l1
        if not homogenized and _forces_long_only(cons, N):
            # The penalty is the constant l1 on a nonnegative feasible set;
            # any positive cost on w- then has the same argmin.
            cost = min(cost, float(np.max(np.diag(P)[w])) or cost)
        if homogenized:
            cost *= norm_scale
            q[layout.blocks["gamma"]] += reg.l1 * norm_scale
        q[layout.blocks["w_minus"]] += cost
    qp = QPProblem(P=P, q=q, A=sp.csc_matrix(A), l=lo, u=hi, check_psd=False)
    return ReformulatedQP(qp=qp, layout=layout, row_labels=tuple(labels))


def recover_weights(reform: ReformulatedQP, sol: QPSolution):
    """Extract the N portfolio weights from a solved reformulation."""
    if sol.status is not Status.SOLVED:
        raise RecoveryError(f"cannot recover weights from a {sol.status.value} solution")
    lay = reform.layout
    x = np.asarray(sol.x, dtype=float)
    if lay.split:
        w = x[lay.blocks["w_plus"]] - x[lay.blocks["w_minus"]]
    else:
        w = x[lay.blocks["w"]].copy()
    if lay.homogenized:
        gamma = float(x[lay.blocks["gamma"]][0])
        if gamma <= 1e-12:
            raise RecoveryError(f"homogenization scale gamma = {gamma:.3e} is not positive")
        w = w / gamma
    return w


def solve_portfolio(spec: PortfolioSpec, settings: QPSettings = HIGH, warm_start=None):
    """Build, solve and recover; returns (weights, solution, reformulation).

    ``warm_start`` is an (x, y) pair of a previous reformulated QP of the same shape.
    """
    if spec.constraints.tracking_error is not None:
        w = solve_with_tracking_error(spec, settings)
        return w, None, None
    reform = build_qp(spec)
    sol = solve_qp(reform.qp, settings, warm_start=warm_start)
    if sol.status in (Status.PRIMAL_INFEASIBLE, Status.DUAL_INFEASIBLE):
        raise InfeasibleError(f"portfolio problem is {sol.status.value}")
    if sol.status is not Status.SOLVED:
        raise ConvergenceError(f"solver stopped with {sol.status.value} after {sol.iterations} iterations")
    return recover_weights(reform, sol), sol, reform


def optimal_weights(spec: PortfolioSpec, settings: QPSettings = HIGH):
    return solve_portfolio(spec, settings)[0]


# ---------------------------------------------------------------------------
# Frontier and auxiliary portfolios
# ---------------------------------------------------------------------------


@dataclass
class FrontierPoint:
    target: float
    feasible: bool
    mean: float = np.nan
    stdev: float = np.nan
    weights: Optional[np.ndarray] = None
    status: str = ""


def efficient_frontier(spec: PortfolioSpec, targets, settings: QPSettings = HIGH):
    """One point per target mean; infeasible targets are kept and flagged."""
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if targets.size == 0:
        raise PortQPError("the target grid is empty")
    if isinstance(spec.objective, MaxSharpe):
        raise PortQPError("efficient_frontier needs a MinVariance/MeanVariance spec")
    if spec.mu is None:
        raise PortQPError("efficient_frontier requires mu")
    out = []
    for t in targets:
        s = replace(spec, objective=MeanVariance(float(t)))
        try:
            w, sol, _ = solve_portfolio(s, settings)
        except (InfeasibleError, ConvergenceError) as exc:
            out.append(FrontierPoint(target=float(t), feasible=False, status=str(exc)))
            continue
        out.append(FrontierPoint(target=float(t), feasible=True, mean=float(w @ spec.mu),
                                 stdev=float(np.sqrt(max(w @ spec.cov @ w, 0.0))), weights=w,
                                 status=sol.status.value))
    return out


def frontier_targets(spec: PortfolioSpec, points: int = 20, settings: QPSettings = HIGH):
    """Evenly spaced targets from the minimum-variance mean to the largest
    attainable mean (the largest asset mean when the set is unbounded)."""
    if spec.mu is None:
        raise PortQPError("frontier targets require mu")
    if points < 2:
        raise PortQPError("need at least two frontier points")
    w0 = optimal_weights(replace(spec, objective=MinVariance()), settings)
    lo = float(w0 @ spec.mu)
    hi = max_excess_return(replace(spec, objective=MaxSharpe(0.0)))
    if not np.isfinite(hi):
        hi = float(spec.mu.max())
    return np.linspace(lo, max(lo, hi), points)


def random_dirichlet_portfolios(n_assets: int, draws: int, seed: int):
    """``draws`` iid Dir(1_N) weight vectors (uniform on the simplex)."""
    if n_assets < 1 or draws < 1:
        raise PortQPError("n_assets and draws must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    e = rng.standard_exponential((draws, n_assets))
    return e / e.sum(axis=1, keepdims=True)


def equal_risk_contribution(cov, tol=1e-13, max_iter=100_000):
    """Long-only weights with equal risk contributions w_i (Sw)_i.

    Cyclic coordinate descent on 1/2 x'Sx - (1/N) sum log x, whose stationary
    point has x_i (Sx)_i = 1/N; the normalized x is the ERC portfolio.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"covariance must be square, got {cov.shape}")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("covariance is not positive definite") from exc
    d = np.abs(np.diag(chol))
    if d.min() <= 1e-10 * d.max():
        raise SingularMatrixError("covariance is numerically singular")
    n = cov.shape[0]
    b = np.full(n, 1.0 / n)
    x = 1.0 / np.sqrt(np.diag(cov))
    x *= 1.0 / np.sqrt(n * (x @ cov @ x))
    x, iters, err = kernels.erc_ccd(cov, b, x, tol, max_iter)
    if not err <= tol * 10:
        raise ConvergenceError(f"ERC iteration did not converge (residual {err:.2e})")
    return x / x.sum()


def tracking_error_variance(w, w_b, cov):
    d = np.asarray(w) - np.asarray(w_b)
    return float(d @ cov @ d)


def solve_with_tracking_error(spec: PortfolioSpec, settings: QPSettings = HIGH,
                              rel_tol: float = 1e-9, max_bisect: int = 200):
    """Optimal weights subject to (w - w_B)'S(w - w_B) <= sigma_te^2.

    Bisection on the multiplier nu of the penalty nu (w - w_B)'S(w - w_B):
    the tracking error of the penalized optimum is nonincreasing in nu, and the
    penalized optimum at the nu where the bound is active solves the
    constrained problem.
    """
    if spec.constraints.tracking_error is None:
        raise PortQPError("spec has no tracking_error constraint")
    if isinstance(spec.objective, MaxSharpe):
        raise PortQPError("tracking-error constraints are supported for MinVariance/MeanVariance")
    w_b, bound = spec.constraints.tracking_error
    w_b = _vec(w_b, spec.n_assets, "benchmark weights")
    bound = float(bound)

    def solve(nu):
        reform = build_qp(spec, _te_penalty=(nu, w_b))
        sol = solve_qp(reform.qp, settings)
        if sol.status is not Status.SOLVED:
            raise InfeasibleError(f"penalized problem at nu={nu:.3e}: {sol.status.value}")
        w = recover_weights(reform, sol)
        return w, tracking_error_variance(w, w_b, spec.cov)

    w0, te0 = solve(0.0)
    if te0 <= bound:
        return w0
    hi = 1.0
    w_hi, te_hi = solve(hi)
    while te_hi > bound:
        hi *= 10.0
        if hi > 1e14:
            raise InfeasibleError(
                f"tracking-error bound {bound:.3e} unattainable (reached {te_hi:.3e})")
        w_hi, te_hi = solve(hi)
    lo = hi / 10.0 if hi > 1.0 else 0.0
    for _ in range(max_bisect):
        if bound - te_hi <= rel_tol * bound:
            break
        mid = np.sqrt(lo * hi) if lo > 0 else 0.5 * hi
        w_mid, te_mid = solve(mid)
        if te_mid > bound:
            lo = mid
        else:
            hi, w_hi, te_hi = mid, w_mid, te_mid
        if hi - lo <= 1e-15 * hi:
            break
    return w_hi


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _arr(v):
    return None if v is None else np.asarray(v, dtype=float).tolist()


def _enc(v):
    v = float(v)
    return "inf" if v == np.inf else "-inf" if v == -np.inf else v


def objective_to_dict(obj):
    d = {"kind": obj.kind}
    if isinstance(obj, MeanVariance):
        d["target"] = obj.target
    elif isinstance(obj, MaxSharpe):
        d["rf"] = obj.rf
    return d


def objective_from_dict(d):
    kind = d["kind"]
    if kind == "MinVariance":
        return MinVariance()
    if kind == "MeanVariance":
        return MeanVariance(float(d["target"]))
    if kind == "MaxSharpe":
        return MaxSharpe(float(d.get("rf", 0.0)))
    raise PortQPError(f"unknown objective kind {kind!r}")


def constraints_to_dict(c: ConstraintSet):
    d = {"budget": c.budget, "long_only": c.long_only}
    if c.box is not None:
        d["box"] = {"lower": [_enc(v) for v in np.ravel(c.box[0])],
                    "upper": [_enc(v) for v in np.ravel(c.box[1])]}
    if c.long_short is not None:
        d["long_short"] = c.long_short
    if c.turnover_individual is not None:
        d["turnover_individual"] = {"w_prev": _arr(c.turnover_individual[0]),
                                    "limit": _arr(np.ravel(c.turnover_individual[1]))}
    if c.turnover_total is not None:
        d["turnover_total"] = {"w_prev": _arr(c.turnover_total[0]), "limit": float(c.turnover_total[1])}
    if c.benchmark_l1 is not None:
        d["benchmark_l1"] = {"w_b": _arr(c.benchmark_l1[0]), "limit": float(c.benchmark_l1[1])}
    if c.factor_exposure is not None:
        d["factor_exposure"] = {"loadings": _arr(c.factor_exposure.loadings),
                                "bounds": _arr(c.factor_exposure.bounds)}
    if c.linear_extra is not None:
        d["linear_extra"] = {"A_w": _arr(c.linear_extra[0]), "u_w": _arr(c.linear_extra[1])}
    if c.tracking_error is not None:
        d["tracking_error"] = {"w_b": _arr(c.tracking_error[0]), "variance": float(c.tracking_error[1])}
    return d


def _dec_list(v):
    return np.array([float(t) for t in v])


def constraints_from_dict(d, n_assets=None):
    kw = {"budget": bool(d.get("budget", True)), "long_only": bool(d.get("long_only", False))}
    if "box" in d:
        lo, up = d["box"]["lower"], d["box"]["upper"]
        if not isinstance(lo, list):
            lo = [lo] * n_assets
        if not isinstance(up, list):
            up = [up] * n_assets
        kw["box"] = (_dec_list(lo), _dec_list(up))
    if d.get("long_short") is not None:
        kw["long_short"] = float(d["long_short"])
    if "turnover_individual" in d:
        t = d["turnover_individual"]
        kw["turnover_individual"] = (np.array(t["w_prev"]), np.array(t["limit"]))
    if "turnover_total" in d:
        t = d["turnover_total"]
        kw["turnover_total"] = (np.array(t["w_prev"]), float(t["limit"]))
    if "benchmark_l1" in d:
        t = d["benchmark_l1"]
        kw["benchmark_l1"] = (np.array(t["w_b"]), float(t["limit"]))
    if "factor_exposure" in d:
        t = d["factor_exposure"]
        kw["factor_exposure"] = FactorExposure(np.array(t["loadings"]),
                                               None if t.get("bounds") is None else np.array(t["bounds"]))
    if "linear_extra" in d:
        t = d["linear_extra"]
        kw["linear_extra"] = (np.array(t["A_w"]), np.array(t["u_w"]))
    if "tracking_error" in d:
        t = d["tracking_error"]
        kw["tracking_error"] = (np.array(t["w_b"]), float(t["variance"]))
    return ConstraintSet(**kw)


def spec_to_dict(spec: PortfolioSpec, include_data=True):
    d = {
        "objective": objective_to_dict(spec.objective),
        "constraints": constraints_to_dict(spec.constraints),
        "regularization": {"l1": spec.regularization.l1, "l2": spec.regularization.l2},
    }
    if include_data:
        d["cov"] = spec.cov.tolist()
        d["mu"] = _arr(spec.mu)
    return d


def spec_from_dict(d, cov=None, mu=None):
    cov = np.array(d["cov"]) if cov is None else cov
    if mu is None and d.get("mu") is not None:
        mu = np.array(d["mu"])
    reg = d.get("regularization", {})
    return PortfolioSpec(
        objective=objective_from_dict(d["objective"]),
        cov=cov,
        mu=mu,
        constraints=constraints_from_dict(d.get("constraints", {}), np.asarray(cov).shape[0]),
        regularization=Regularization(float(reg.get("l1", 0.0)), float(reg.get("l2", 0.0))),
    )
