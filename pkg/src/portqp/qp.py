"""Standard-form convex QP and an ADMM operator-splitting solver.

    minimize    1/2 x'Px + q'x
    subject to  l <= Ax <= u

The iteration is the OSQP splitting: each step solves the quasi-definite KKT
system

    [P + sigma I    A'      ] [x~]   [sigma x - q      ]
    [A             -diag(1/rho)] [nu] = [z - y/rho       ]

followed by an over-relaxed projection of z onto [l, u] and a dual ascent
step on y. The KKT matrix is factorized once (LDL' with a minimum-degree
ordering, or SuperLU on the numpy path) and reused until rho is adapted.
Data are equilibrated with modified Ruiz scaling before iterating; all
reported residuals are in unscaled units.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.optimize import lsq_linear

from . import _accel, kernels
from .errors import BoundsError, DimensionError, NotPSDError, NotSymmetricError

RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_FACTOR = 1e3
SCALING_MIN = 1e-4
SCALING_MAX = 1e4


class Status(str, enum.Enum):
    SOLVED = "Solved"
    MAX_ITER_REACHED = "MaxIterReached"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"


@dataclass(frozen=True)
class QPSettings:
    max_iter: int = 4000
    eps_abs: float = 1e-3
    eps_rel: float = 1e-3
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    polish: bool = False
    eps_prim_inf: float = 1e-4
    eps_dual_inf: float = 1e-4
    scaling: int = 10
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    check_every: int = 5
    polish_refine_iter: int = 3
    polish_delta: float = 1e-6
    # First iteration at which a polish is attempted before termination; later
    # attempts happen each time the iteration count doubles. 0 disables.
    polish_early_start: int = 100

    def __post_init__(self):
        if not self.eps_abs > 0 or not self.eps_rel > 0:
            raise ValueError("eps_abs and eps_rel must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must lie in (0, 2)")
        if not self.rho > 0 or not self.sigma > 0:
            raise ValueError("rho and sigma must be positive")


DEFAULT = QPSettings()
HIGH = QPSettings(max_iter=10_000, eps_abs=1e-8, eps_rel=1e-8, polish=True)
PRESETS = {"default": DEFAULT, "high": HIGH}


def _as_csc(A, m, n):
    if sp.issparse(A):
        return sp.csc_matrix(A, dtype=float)
    if isinstance(A, tuple) and len(A) == 3:
        rows, cols, vals = (np.asarray(v) for v in A)
        return sp.csc_matrix((vals.astype(float), (rows.astype(int), cols.astype(int))), shape=(m, n))
    A = np.asarray(A, dtype=float)
    if A.size == 0 and m * n == 0:
        A = A.reshape(m, n)
    if A.ndim != 2:
        raise DimensionError(f"A must be two-dimensional, got shape {A.shape}")
    return sp.csc_matrix(A)


@dataclass(frozen=True, eq=False)
class QPProblem:
    """Immutable QP data. ``A`` may be dense, scipy.sparse or a (rows, cols, vals) triplet."""

    P: np.ndarray
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    check_psd: bool = field(default=True, repr=False)

    def __post_init__(self):
        P = np.array(self.P.toarray() if sp.issparse(self.P) else self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DimensionError(f"P must be square, got shape {P.shape}")
        n = P.shape[0]
        q = np.array(self.q, dtype=float).reshape(-1)
        if q.size != n:
            raise DimensionError(f"q has {q.size} entries, expected {n}")
        l = np.array(self.l, dtype=float).reshape(-1)
        u = np.array(self.u, dtype=float).reshape(-1)
        if l.size != u.size:
            raise DimensionError(f"l has {l.size} entries but u has {u.size}")
        m = l.size
        A = _as_csc(self.A, m, n)
        if A.shape != (m, n):
            raise DimensionError(f"A has shape {A.shape}, expected ({m}, {n})")
        if np.any(np.isnan(l)) or np.any(np.isnan(u)) or not np.all(np.isfinite(q)):
            raise BoundsError("NaN in bounds or non-finite q")
        bad = np.flatnonzero(l > u)
        if bad.size:
            raise BoundsError(f"l > u on rows {bad.tolist()[:10]}")
        scale = max(np.max(np.abs(P)) if P.size else 0.0, 1.0)
        if not np.allclose(P, P.T, rtol=0.0, atol=1e-12 * scale):
            raise NotSymmetricError("P is not symmetric")
        P = 0.5 * (P + P.T)
        if self.check_psd and n:
            support = np.flatnonzero(np.any(P != 0.0, axis=0))
            if support.size:
                ev = np.linalg.eigvalsh(P[np.ix_(support, support)])
                if ev[0] < -1e-10 * max(ev[-1], 0.0) - 1e-300:
                    raise NotPSDError(f"P has eigenvalue {ev[0]:.3e} < 0")
        for arr in (P, q, l, u):
            arr.setflags(write=False)
        A.sort_indices()
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "u", u)

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def m(self):
        return self.l.size

    def objective(self, x):
        return 0.5 * x @ self.P @ x + self.q @ x

    def to_dict(self):
        coo = self.A.tocoo()
        enc = lambda v: [_enc_float(t) for t in v]
        return {
            "n": self.n,
            "m": self.m,
            "P": enc(self.P.ravel()),
            "q": enc(self.q),
            "A": [[int(r), int(c), float(v)] for r, c, v in zip(coo.row, coo.col, coo.data)],
            "l": enc(self.l),
            "u": enc(self.u),
        }

    @classmethod
    def from_dict(cls, d):
        n, m = int(d["n"]), int(d["m"])
        P = np.array([_dec_float(v) for v in d["P"]], dtype=float).reshape(n, n)
        trip = np.array(d["A"], dtype=float).reshape(-1, 3)
        A = (trip[:, 0].astype(int), trip[:, 1].astype(int), trip[:, 2])
        A = _as_csc(A, m, n)
        return cls(P=P, q=[_dec_float(v) for v in d["q"]], A=A,
                   l=[_dec_float(v) for v in d["l"]], u=[_dec_float(v) for v in d["u"]])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _enc_float(v):
    v = float(v)
    if v == np.inf:
        return "inf"
    if v == -np.inf:
        return "-inf"
    return v


def _dec_float(v):
    return float(v)


@dataclass
class QPSolution:
    x: np.ndarray
    y: np.ndarray
    status: Status
    iterations: int
    objective: float
    prim_res: float = np.nan
    dual_res: float = np.nan
    polished: bool = False
    rho_updates: int = 0


@dataclass(frozen=True)
class KKTResiduals:
    primal: float
    dual: float
    gap: float


def check_kkt(problem: QPProblem, solution: QPSolution, settings: QPSettings = HIGH) -> KKTResiduals:
    """Primal, dual and duality-gap residuals (infinity norms, unscaled)."""
    x = np.asarray(solution.x, dtype=float)
    y = np.asarray(solution.y, dtype=float)
    if x.size != problem.n or y.size != problem.m:
        raise DimensionError(f"solution sizes ({x.size}, {y.size}) do not match problem "
                             f"({problem.n}, {problem.m})")
    ax = problem.A @ x
    primal = float(np.max(np.abs(ax - np.clip(ax, problem.l, problem.u)))) if problem.m else 0.0
    px = problem.P @ x
    dual = float(np.max(np.abs(px + problem.q + problem.A.T @ y))) if problem.n else 0.0
    ypos = np.maximum(y, 0.0)
    yneg = np.minimum(y, 0.0)
    with np.errstate(invalid="ignore"):
        sup = np.where(ypos > 0, problem.u * ypos, 0.0) + np.where(yneg < 0, problem.l * yneg, 0.0)
    gap = float(abs(x @ px + problem.q @ x + np.sum(sup)))
    return KKTResiduals(primal=primal, dual=dual, gap=gap)


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


def _col_inf_norm(M):
    M = sp.csc_matrix(M)
    out = np.zeros(M.shape[1])
    if M.nnz:
        nonempty = np.diff(M.indptr) > 0
        starts = M.indptr[:-1][nonempty]
        out[nonempty] = np.maximum.reduceat(np.abs(M.data), starts)
    return out


def _row_inf_norm(M):
    out = np.zeros(M.shape[0])
    if M.nnz:
        np.maximum.at(out, M.indices, np.abs(M.data))
    return out


def _limit(v):
    v = v.copy()
    v[v < SCALING_MIN] = 1.0
    return np.minimum(v, SCALING_MAX)


def _col_index(M):
    return np.repeat(np.arange(M.shape[1]), np.diff(M.indptr))


def ruiz_scale(P, q, A, iters):
    """Modified Ruiz equilibration. Returns scaled data and (D, E, c)."""
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    P = sp.csc_matrix(P, copy=True)
    A = sp.csc_matrix(A, copy=True)
    P.sum_duplicates()
    A.sum_duplicates()
    Pcols = _col_index(P)
    Acols = _col_index(A)
    q = q.copy()
    for _ in range(iters):
        col = np.maximum(_col_inf_norm(P), _col_inf_norm(A)) if m else _col_inf_norm(P)
        d = 1.0 / np.sqrt(_limit(col))
        e = 1.0 / np.sqrt(_limit(_row_inf_norm(A))) if m else np.ones(0)
        P.data *= d[P.indices] * d[Pcols]
        if m:
            A.data *= e[A.indices] * d[Acols]
        q = d * q
        D *= d
        E *= e
        # Cost normalization over the columns that carry curvature: averaging
        # in the zero columns of auxiliary split variables inflates c and
        # squeezes the weight block.
        pcol = _col_inf_norm(P)
        pcol = pcol[pcol > 0.0]
        gamma = max(np.mean(pcol) if pcol.size else 0.0, np.max(np.abs(q)) if n else 0.0)
        gamma = 1.0 / _limit(np.array([gamma]))[0]
        P.data *= gamma
        q = gamma * q
        c *= gamma
    return P, q, A, D, E, c


# ---------------------------------------------------------------------------
# KKT factorization
# ---------------------------------------------------------------------------


def _kkt_matrix(P, A, sigma, rho):
    n, m = P.shape[0], A.shape[0]
    top = sp.hstack([P + sigma * sp.eye(n), A.T])
    bot = sp.hstack([A, sp.diags(-1.0 / rho) if m else sp.csc_matrix((0, 0))])
    return sp.vstack([top, bot]).tocsc()


@lru_cache(maxsize=64)
def _cached_ordering(n, indptr_bytes, indices_bytes):
    indptr = np.frombuffer(indptr_bytes, dtype=np.int64)
    indices = np.frombuffer(indices_bytes, dtype=np.int64)
    # Strong diagonal keeps SuperLU pivot-free; only the pattern matters here.
    data = np.where(np.repeat(np.arange(n), np.diff(indptr)) == indices, float(n), 1.0)
    K = sp.csc_matrix((data, indices, indptr), shape=(n, n))
    lu = splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
              options=dict(SymmetricMode=True))
    return np.argsort(lu.perm_c).astype(np.int64)


def kkt_ordering(K):
    """Fill-reducing symmetric ordering (new position -> old index).

    Uses SuperLU's minimum-degree ordering on A + A'; cached on the sparsity
    pattern so rolling-window solves with identical structure pay once.
    """
    pattern = sp.csc_matrix((np.ones(K.nnz), K.indices, K.indptr), shape=K.shape)
    pattern = (pattern + sp.eye(K.shape[0], format="csc")).tocsc()
    pattern.sort_indices()
    return _cached_ordering(K.shape[0], pattern.indptr.astype(np.int64).tobytes(),
                            pattern.indices.astype(np.int64).tobytes())


class _LDLFactor:
    """Numba LDL' of the permuted quasi-definite KKT matrix."""

    def __init__(self, K):
        self.perm = kkt_ordering(K)
        Kp = K[self.perm][:, self.perm]
        U = sp.triu(Kp, format="csc")
        U.sort_indices()
        nk = K.shape[0]
        Ap = U.indptr.astype(np.int64)
        Ai = U.indices.astype(np.int64)
        etree, lnz, ok = kernels.ldl_etree_nb(nk, Ap, Ai)
        if not ok:  # pragma: no cover - triu guarantees upper form
            raise RuntimeError("KKT matrix is not upper triangular")
        Lp, Li, Lx, D, Dinv, ok = kernels.ldl_factor_nb(nk, Ap, Ai, U.data.astype(float), etree, lnz)
        if not ok:
            raise np.linalg.LinAlgError("zero pivot in KKT factorization")
        self.Lp, self.Li, self.Lx, self.Dinv = Lp, Li, Lx, Dinv
        self.nnz = int(Lp[-1])

    def solve(self, b):
        x = b[self.perm].copy()
        kernels.ldl_solve_nb(x.size, self.Lp, self.Li, self.Lx, self.Dinv, x)
        out = np.empty_like(x)
        out[self.perm] = x
        return out


class _SuperLUFactor:
    def __init__(self, K):
        self._lu = splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                        options=dict(SymmetricMode=True))
        self.nnz = int(self._lu.L.nnz + self._lu.U.nnz)

    def solve(self, b):
        return self._lu.solve(b)


def _factorize(K):
    return _LDLFactor(K) if _accel.USE_NUMBA else _SuperLUFactor(K)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def _rho_vector(l, u, rho):
    r = np.full(l.size, rho)
    both_inf = (l == -np.inf) & (u == np.inf)
    eq = np.isfinite(u - l) & ((u - l) < 1e-4 * np.maximum(1.0, np.abs(u)))
    eq &= ~both_inf
    r[eq] = RHO_EQ_FACTOR * rho
    r[both_inf] = RHO_MIN
    return r


def _safe_ratio(num, den):
    return num / den if den > 1e-30 else num


class _Workspace:
    def __init__(self, problem, settings):
        self.problem = problem
        self.settings = settings
        P, q, A, D, E, c = ruiz_scale(sp.csc_matrix(problem.P), problem.q, problem.A,
                                      settings.scaling)
        self.P, self.q, self.A = P, q, A
        self.D, self.E, self.c = D, E, c
        self.l = E * problem.l
        self.u = E * problem.u
        self.rho_scalar = settings.rho
        self.rho = _rho_vector(self.l, self.u, self.rho_scalar)
        self.Pcsr = P.tocsr()
        self.Acsr = A.tocsr()
        self.Atcsr = A.T.tocsr()
        self.factor = None
        self.refactor()

    def refactor(self):
        K = _kkt_matrix(self.P, self.A, self.settings.sigma, self.rho)
        self.factor = _factorize(K)

    def iterate(self, x, z, y, k_start, k_stop):
        s = self.settings
        c_inv = 1.0 / self.c
        if _accel.USE_NUMBA:
            f = self.factor
            Pc, Ac, Atc = self.Pcsr, self.Acsr, self.Atcsr
            return kernels.admm_iterate_nb(
                f.Lp, f.Li, f.Lx, f.Dinv, f.perm,
                Pc.indptr.astype(np.int64), Pc.indices.astype(np.int64), Pc.data,
                Ac.indptr.astype(np.int64), Ac.indices.astype(np.int64), Ac.data,
                Atc.indptr.astype(np.int64), Atc.indices.astype(np.int64), Atc.data,
                self.q, self.l, self.u, self.rho, s.sigma, s.alpha,
                self.D, self.E, c_inv, s.eps_abs, s.eps_rel, s.eps_prim_inf, s.eps_dual_inf,
                x, z, y, k_start, k_stop, s.check_every)
        return kernels.admm_iterate_np(
            self.factor.solve, self.Pcsr, self.Acsr, self.q, self.l, self.u, self.rho,
            s.sigma, s.alpha, self.D, self.E, c_inv, s.eps_abs, s.eps_rel,
            s.eps_prim_inf, s.eps_dual_inf, x, z, y, k_start, k_stop, s.check_every)

    def adapt_rho(self, x, z, y):
        """Balance relative primal/dual residuals; True if rho changed enough to refactor.

        The residuals are measured in the unscaled problem, the same quantities
        the termination test uses, so a badly conditioned scaling cannot mask
        an imbalance.
        """
        Einv = 1.0 / self.E
        Dinv = 1.0 / (self.D * self.c)
        ax = Einv * (self.Acsr @ x)
        zz = Einv * z
        px = Dinv * (self.Pcsr @ x)
        aty = Dinv * (self.Atcsr @ y)
        qq = Dinv * self.q
        prim = _safe_ratio(np.max(np.abs(ax - zz), initial=0.0),
                           max(np.max(np.abs(ax), initial=0.0), np.max(np.abs(zz), initial=0.0)))
        dual = _safe_ratio(np.max(np.abs(px + qq + aty)),
                           max(np.max(np.abs(px)), np.max(np.abs(aty), initial=0.0), np.max(np.abs(qq))))
        new = self.rho_scalar * np.sqrt(prim / (dual + 1e-30))
        new = float(np.clip(new, RHO_MIN, RHO_MAX))
        tol = self.settings.adaptive_rho_tolerance
        if new > self.rho_scalar * tol or new < self.rho_scalar / tol:
            self.rho_scalar = new
            self.rho = _rho_vector(self.l, self.u, new)
            self.refactor()
            return True
        return False

    def unscale(self, x, y):
        return self.D * x, self.E * y / self.c


def _residuals(problem, x, y):
    ax = problem.A @ x
    px = problem.P @ x
    aty = problem.A.T @ y
    z = np.clip(ax, problem.l, problem.u)
    prim = float(np.max(np.abs(ax - z))) if problem.m else 0.0
    pscale = max(float(np.max(np.abs(ax))), float(np.max(np.abs(z)))) if problem.m else 0.0
    dual = float(np.max(np.abs(px + problem.q + aty)))
    dscale = max(float(np.max(np.abs(px))), float(np.max(np.abs(aty))),
                 float(np.max(np.abs(problem.q))))
    return prim, dual, pscale, dscale


def _tolerance_ratio(problem, x, y, settings):
    """Worst residual as a fraction of its tolerance (<= 1 means converged)."""
    prim, dual, pscale, dscale = _residuals(problem, x, y)
    ratio = max(prim / (settings.eps_abs + settings.eps_rel * pscale),
                dual / (settings.eps_abs + settings.eps_rel * dscale))
    return ratio, prim, dual


def _within_tolerance(problem, x, y, settings):
    ratio, prim, dual = _tolerance_ratio(problem, x, y, settings)
    return ratio <= 1.0, prim, dual


def _columnwise_dual_ok(problem, x, y, settings):
    """Stationarity per variable, each against its own scale.

    The global test measures the residual against the largest gradient term
    anywhere in the problem; one large linear cost then hides a wrong active
    set on variables whose gradients are orders of magnitude smaller.
    """
    px = problem.P @ x
    aty = problem.A.T @ y
    res = np.abs(px + problem.q + aty)
    scale = np.maximum(np.maximum(np.abs(px), np.abs(problem.q)), np.abs(aty))
    return bool(np.all(res <= settings.eps_abs + settings.eps_rel * scale))


def _sign_limits(problem, A, xp, yp):
    """Per-row tolerance for a wrong-signed multiplier.

    A multiplier is judged against the gradient it balances, not against the
    largest multiplier in the problem; otherwise a big linear cost elsewhere
    lets a bound with a small wrong-signed multiplier pass as active.
    """
    g = np.maximum(np.abs(problem.P @ xp), np.abs(problem.q))
    csr = A.tocsr()
    data = np.abs(csr.data)
    ratio = np.where(data > 0, g[csr.indices] / np.where(data > 0, data, 1.0), 0.0)
    rows = np.repeat(np.arange(csr.shape[0]), np.diff(csr.indptr))
    row_scale = np.zeros(csr.shape[0])
    np.maximum.at(row_scale, rows, ratio)
    noise = 64.0 * np.finfo(float).eps * max(1.0, np.max(np.abs(yp), initial=0.0))
    return 1e-9 * row_scale + noise


def polish(problem: QPProblem, x, y, settings: QPSettings = HIGH, passes: int = 25,
           dual_fit: bool = True):
    """Re-solve on the active set guessed from (x, y) with an exact KKT solve.

    Returns (x, y) of the polished point, or None on failure. Equality rows
    are always active. Each pass solves the reduced KKT system, then adds
    inequality rows the point violates or, if there are none, drops rows whose
    multiplier has the wrong sign (a primal-dual active-set step). When the
    set stops changing or repeats, a bounded least-squares fit looks for
    sign-consistent multipliers, which a degenerate active set may need;
    ``dual_fit=False`` skips that fit (cheap attempts during the iteration).
    """
    A = problem.A.tocsr()
    ax = A @ x
    l, u = problem.l, problem.u
    eq = np.isfinite(u - l) & ((u - l) <= 1e-12 * np.maximum(1.0, np.abs(u)))
    low = (ax - l < -y) | (eq & (y <= 0))
    upp = ((u - ax < y) | (eq & (y > 0))) & ~low
    low &= np.isfinite(l)
    upp &= np.isfinite(u)
    n = problem.n
    delta = settings.polish_delta
    P = sp.csc_matrix(problem.P)
    seen = set()
    for k_pass in range(max(1, passes)):
        idx = np.flatnonzero(low | upp)
        b = np.where(low, l, u)[idx]
        Ared = A[idx]
        k = idx.size
        K = sp.bmat([[P, Ared.T], [Ared, sp.csc_matrix((k, k))]], format="csc")
        Kd = (K + sp.diags(np.concatenate((np.full(n, delta), np.full(k, -delta))))).tocsc()
        rhs = np.concatenate((-problem.q, b))
        try:
            lu = splu(Kd, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        # delta can be large next to a small-scale P, so refine to convergence
        # rather than a fixed number of steps
        res_norm = np.inf
        for it in range(max(settings.polish_refine_iter, 200)):
            r = rhs - K @ sol
            rn = np.max(np.abs(r), initial=0.0)
            if it >= settings.polish_refine_iter and rn >= 0.5 * res_norm:
                break
            res_norm = rn
            sol = sol + lu.solve(r)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(problem.m)
        yp[idx] = sol[n:]
        axp = A @ xp
        tol = settings.eps_abs + settings.eps_rel * np.abs(axp)
        new_low = ~(low | upp) & (axp < l - tol)
        new_upp = ~(low | upp) & (axp > u + tol)
        if new_low.any() or new_upp.any():
            low |= new_low
            upp |= new_upp
            continue
        seen.add((low.tobytes(), upp.tobytes()))
        yv = _sign_valid_duals(problem, A, xp, yp, idx, low, upp, eq, settings, fit=False)
        if yv is not None:
            return (xp, yv) if _columnwise_dual_ok(problem, xp, yv, settings) else None
        lim = _sign_limits(problem, A, xp, yp)
        wrong = ~eq & ((low & (yp > lim)) | (upp & (yp < -lim)))
        nxt_low, nxt_upp = low & ~wrong, upp & ~wrong
        if k_pass == passes - 1 or (nxt_low.tobytes(), nxt_upp.tobytes()) in seen:
            break
        low, upp = nxt_low, nxt_upp
    else:
        return None
    if not dual_fit:
        return None
    yv = _sign_valid_duals(problem, A, xp, yp, idx, low, upp, eq, settings, fit=True)
    if yv is None or not _columnwise_dual_ok(problem, xp, yv, settings):
        return None
    return xp, yv


def _sign_valid_duals(problem, A, xp, yp, idx, low, upp, eq, settings, fit=True):
    """Multipliers for ``xp`` that respect the bound signs, or None.

    Rows at a lower bound need y <= 0 and rows at an upper bound y >= 0.
    With a degenerate active set the KKT solve may return one of many valid
    multiplier vectors with the wrong sign; a bounded least-squares fit on the
    active rows then looks for a sign-consistent one.
    """
    lo_rows = low & ~eq
    up_rows = upp & ~eq
    lim = _sign_limits(problem, A, xp, yp)
    if not (np.any(yp[lo_rows] > lim[lo_rows]) or np.any(yp[up_rows] < -lim[up_rows])):
        return yp
    if not fit:
        return None
    g = problem.P @ xp + problem.q
    At = A[idx].T.tocsc()
    lb = np.where(up_rows[idx], 0.0, -np.inf)
    ub = np.where(lo_rows[idx], 0.0, np.inf)
    res = lsq_linear(At, -g, bounds=(lb, ub), method="trf", tol=1e-14, lsmr_tol="auto",
                     max_iter=2000)
    yv = np.zeros(problem.m)
    yv[idx] = np.clip(res.x, lb, ub)
    _, dual, _, dscale = _residuals(problem, xp, yv)
    if dual <= settings.eps_abs + settings.eps_rel * dscale:
        return yv
    return None


def solve_qp(problem: QPProblem, settings: QPSettings = DEFAULT, warm_start=None) -> QPSolution:
    """Solve ``problem`` with ADMM; deterministic for fixed inputs and settings.

    ``warm_start`` is an optional (x, y) pair, typically the solution of a
    neighbouring problem. With polishing enabled its active set is tried first.
    """
    n, m = problem.n, problem.m
    if warm_start is not None:
        x0, y0 = (np.asarray(v, dtype=float) for v in warm_start)
        if x0.shape != (n,) or y0.shape != (m,) or not (np.all(np.isfinite(x0)) and np.all(np.isfinite(y0))):
            warm_start = None
    if warm_start is not None and settings.polish:
        pol = polish(problem, x0, y0, settings, dual_fit=False)
        if pol is not None:
            pratio, pprim, pdual = _tolerance_ratio(problem, pol[0], pol[1], settings)
            if pratio <= 1.0:
                return QPSolution(x=pol[0], y=pol[1], status=Status.SOLVED, iterations=0,
                                  objective=float(problem.objective(pol[0])), prim_res=pprim,
                                  dual_res=pdual, polished=True, rho_updates=0)
    ws = _Workspace(problem, settings)
    if warm_start is not None:
        x = x0 / ws.D
        y = y0 * ws.c / ws.E
        z = np.clip(ws.Acsr @ x, ws.l, ws.u)
    else:
        x = np.zeros(n)
        z = np.zeros(m)
        y = np.zeros(m)
    k = 0
    status_code = kernels.RUNNING
    rho_updates = 0
    interval = settings.adaptive_rho_interval if settings.adaptive_rho else settings.max_iter
    next_polish = settings.polish_early_start if settings.polish else 0
    if next_polish > 0:
        interval = min(interval, next_polish)
    while k < settings.max_iter:
        stop = min(settings.max_iter, k + interval)
        if next_polish > k:
            stop = min(stop, next_polish)
        status_code, k, *_ = ws.iterate(x, z, y, k, stop)
        if status_code != kernels.RUNNING:
            break
        if next_polish and k >= next_polish and k < settings.max_iter:
            # A polished point that passes the tolerance test with
            # sign-consistent multipliers is a KKT point, so stopping is safe.
            next_polish *= 2
            xs, ys = ws.unscale(x, y)
            pol = polish(problem, xs, ys, settings, dual_fit=False)
            if pol is not None:
                pratio, pprim, pdual = _tolerance_ratio(problem, pol[0], pol[1], settings)
                if pratio <= 1.0:
                    return QPSolution(x=pol[0], y=pol[1], status=Status.SOLVED, iterations=k,
                                      objective=float(problem.objective(pol[0])), prim_res=pprim,
                                      dual_res=pdual, polished=True, rho_updates=rho_updates)
        if settings.adaptive_rho and k < settings.max_iter and k % settings.adaptive_rho_interval == 0:
            rho_updates += int(ws.adapt_rho(x, z, y))

    xs, ys = ws.unscale(x, y)
    status = {
        kernels.SOLVED: Status.SOLVED,
        kernels.PRIMAL_INFEASIBLE: Status.PRIMAL_INFEASIBLE,
        kernels.DUAL_INFEASIBLE: Status.DUAL_INFEASIBLE,
    }.get(status_code, Status.MAX_ITER_REACHED)

    polished = False
    if status in (Status.PRIMAL_INFEASIBLE, Status.DUAL_INFEASIBLE):
        # Certificates, not solutions.
        return QPSolution(x=xs, y=ys, status=status, iterations=k, objective=np.nan,
                          rho_updates=rho_updates)

    ratio, prim, dual = _tolerance_ratio(problem, xs, ys, settings)
    ok = ratio <= 1.0
    if settings.polish:
        pol = polish(problem, xs, ys, settings)
        if pol is not None:
            pratio, pprim, pdual = _tolerance_ratio(problem, pol[0], pol[1], settings)
            if pratio <= 1.0 and pratio <= ratio:
                xs, ys = pol
                prim, dual, ok, polished = pprim, pdual, True, True
    # Final word on convergence is the unscaled tolerance test.
    status = Status.SOLVED if ok else Status.MAX_ITER_REACHED
    return QPSolution(x=xs, y=ys, status=status, iterations=k,
                      objective=float(problem.objective(xs)), prim_res=prim, dual_res=dual,
                      polished=polished, rho_updates=rho_updates)
