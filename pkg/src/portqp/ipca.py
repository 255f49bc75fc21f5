"""Instrumented PCA (restricted model, no characteristic-driven alpha).

Model: r_{t+1} = Z_t Gamma f_{t+1} + e_{t+1}, with Z_t the N x L
characteristics observed one period before the returns they load on.
Gamma (L x K) and the factors are fitted by alternating least squares on

    sum_t || r_{t+1} - Z_t Gamma f_{t+1} ||^2,

using only W_t = Z_t'Z_t and x_t = Z_t'r_{t+1} (plus r'r for the objective).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .covariance import CovarianceEstimate
from .data_io import CharacteristicsPanel, ReturnsPanel, rank_transform
from .errors import DimensionError, EstimationError, PortQPError


@dataclass(frozen=True, eq=False)
class IPCAModel:
    Gamma: np.ndarray                # L x K
    factors: np.ndarray              # K x (T-1), column s is f_{s+1}
    K: int
    objective_path: tuple            # objective after each full sweep
    residual_variances: np.ndarray   # N
    factor_cov: np.ndarray           # K x K, ddof = 1
    converged: bool = True
    sweeps: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def L(self):
        return self.Gamma.shape[0]

    def to_dict(self):
        return {"K": self.K, "L": self.L, "Gamma": self.Gamma, "factors": self.factors,
                "factor_cov": self.factor_cov, "residual_variances": self.residual_variances,
                "objective_path": list(self.objective_path), "converged": self.converged,
                "sweeps": self.sweeps, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d):
        return cls(Gamma=np.array(d["Gamma"], dtype=float).reshape(d["L"], d["K"]),
                   factors=np.array(d["factors"], dtype=float).reshape(d["K"], -1), K=int(d["K"]),
                   objective_path=tuple(d["objective_path"]),
                   residual_variances=np.array([np.nan if v is None else v
                                                for v in d["residual_variances"]], dtype=float),
                   factor_cov=np.array(d["factor_cov"], dtype=float).reshape(d["K"], d["K"]),
                   converged=bool(d["converged"]), sweeps=int(d["sweeps"]),
                   diagnostics=dict(d.get("diagnostics", {})))


@dataclass
class _Moments:
    W: np.ndarray        # P x L x L
    X: np.ndarray        # P x L
    rr: np.ndarray       # P
    pairs: list          # (t, active index array)


def _moments(returns, chars):
    R = np.asarray(returns.values)
    if chars.N != returns.N or chars.T != returns.T:
        raise DimensionError(f"characteristics {chars.T}x{chars.N} vs returns {returns.T}x{returns.N}")
    if tuple(chars.assets) != tuple(returns.assets):
        raise DimensionError("characteristics and returns list different assets")
    P = returns.T - 1
    L = chars.L
    W = np.zeros((P, L, L))
    X = np.zeros((P, L))
    rr = np.zeros(P)
    pairs = []
    for t in range(P):
        act = np.flatnonzero(chars.mask[t] & returns.mask[t + 1])
        Z = chars.Z[t, act]
        r = R[t + 1, act]
        W[t] = Z.T @ Z
        X[t] = Z.T @ r
        rr[t] = r @ r
        pairs.append((t, act))
    return _Moments(W, X, rr, pairs)


def _objective(mom, gamma, F):
    # sum_t r'r - 2 f'G'x + f'G'WGf
    GX = mom.X @ gamma
    GWG = np.einsum("lk,tlm,mj->tkj", gamma, mom.W, gamma)
    quad = np.einsum("tk,tkj,tj->t", F, GWG, F)
    return float(np.sum(mom.rr - 2.0 * np.sum(F * GX, axis=1) + quad))


def _solve_gamma(mom, F, L, K):
    M, b = kernels.ipca_gamma_system(mom.W, mom.X, F)
    try:
        g = np.linalg.solve(M, b)
        if not np.all(np.isfinite(g)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        g = np.linalg.lstsq(M, b, rcond=None)[0]
    return g.reshape(L, K)


def _normalize(gamma, F):
    """Rotate so that Gamma'Gamma = I and F'F (sum over dates of f f') is
    diagonal with descending entries; largest |entry| of each Gamma column > 0."""
    # Householder QR keeps G1 orthonormal to round-off even when a column of
    # Gamma is nearly redundant (K above the true rank)
    G1, Rq = np.linalg.qr(gamma)
    if not np.all(np.isfinite(Rq)) or not np.any(Rq):
        raise EstimationError("Gamma lost rank during estimation")
    F1 = F @ Rq.T                       # Gamma f = G1 (Rq f)
    ev2, U = np.linalg.eigh(F1.T @ F1)
    U = U[:, np.argsort(ev2)[::-1]]
    G2 = G1 @ U
    F2 = F1 @ U
    idx = np.argmax(np.abs(G2), axis=0)
    sgn = np.sign(G2[idx, np.arange(G2.shape[1])])
    sgn[sgn == 0] = 1.0
    return G2 * sgn, F2 * sgn


def _warm_start(mom, K):
    S = mom.X.T @ mom.X
    ev, V = np.linalg.eigh(S)
    return V[:, np.argsort(ev)[::-1][:K]].copy()


def fit_ipca(returns: ReturnsPanel, chars: CharacteristicsPanel, K: int, tol: float = 1e-9,
             max_sweeps: int = 500, rank_chars: bool = False, gamma_init=None) -> IPCAModel:
    """Alternating least squares; pairs Z at date t with returns at date t+1."""
    L = chars.L
    if not 1 <= K <= L:
        raise PortQPError(f"need 1 <= K <= L (K={K}, L={L})")
    if returns.T < 2:
        raise EstimationError("need at least two dates")
    if rank_chars:
        chars = rank_transform(chars)
    mom = _moments(returns, chars)
    gamma = _warm_start(mom, K) if gamma_init is None else np.array(gamma_init, dtype=float)
    if gamma.shape != (L, K):
        raise DimensionError(f"gamma_init must be {L}x{K}")
    total = float(mom.rr.sum())
    half_path = []
    path = []
    ridge_dates = set()
    converged = False
    sweeps = 0
    prev = np.inf
    for sweeps in range(1, max_sweeps + 1):
        F, flags = kernels.ipca_factors(mom.W, mom.X, gamma)
        ridge_dates.update(np.flatnonzero(flags).tolist())
        half_path.append(_objective(mom, gamma, F))
        gamma = _solve_gamma(mom, F, L, K)
        obj = _objective(mom, gamma, F)
        half_path.append(obj)
        path.append(obj)
        # the span of Q contains that of gamma, so the next factor step cannot
        # do worse; this stops a redundant column from collapsing when K
        # exceeds the rank of the data
        gamma = np.linalg.qr(gamma)[0]
        if obj <= 1e-28 * max(total, 1e-300) or (
                np.isfinite(prev) and abs(prev - obj) <= tol * max(prev, 1e-300)):
            converged = True
            break
        prev = obj
    F, flags = kernels.ipca_factors(mom.W, mom.X, gamma)
    ridge_dates.update(np.flatnonzero(flags).tolist())
    gamma, F = _normalize(gamma, F)
    if not converged:
        warnings.warn(f"IPCA did not converge in {max_sweeps} sweeps", RuntimeWarning, stacklevel=2)

    N = returns.N
    R = np.asarray(returns.values)
    resid = [[] for _ in range(N)]
    for (t, act), f in zip(mom.pairs, F):
        e = R[t + 1, act] - chars.Z[t, act] @ (gamma @ f)
        for i, v in zip(act, e):
            resid[i].append(v)
    rv = np.array([np.var(r, ddof=1) if len(r) > 1 else 0.0 for r in resid])
    fcov = np.atleast_2d(np.cov(F.T, ddof=1)) if F.shape[0] > 1 else np.zeros((K, K))
    diag = {"ridge_dates": sorted(ridge_dates), "half_sweep_objectives": half_path,
            "initial_objective": total, "rank_transformed": bool(rank_chars),
            "factor_dates": list(returns.dates[1:]),
            "thin_residual_assets": [returns.assets[i] for i in range(N) if len(resid[i]) < 2]}
    return IPCAModel(Gamma=gamma, factors=F.T.copy(), K=K, objective_path=tuple(path),
                     residual_variances=rv, factor_cov=fcov, converged=converged, sweeps=sweeps,
                     diagnostics=diag)


def ipca_covariance(model: IPCAModel, Z_t, residual_variances=None) -> CovarianceEstimate:
    """Z Gamma cov(F) Gamma' Z' + diag(residual variances)."""
    if model is None or model.Gamma is None:
        raise EstimationError("model is not fitted")
    Z = np.asarray(Z_t, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != model.L:
        raise DimensionError(f"Z_t must be N x {model.L}, got {Z.shape}")
    d = model.residual_variances if residual_variances is None else np.asarray(residual_variances, float)
    if d.shape != (Z.shape[0],):
        raise DimensionError(f"residual variances have {d.size} entries, expected {Z.shape[0]}")
    B = Z @ model.Gamma
    M = B @ model.factor_cov @ B.T
    M = 0.5 * (M + M.T) + np.diag(d)
    return CovarianceEstimate(M, "IPCA", {"K": model.K, "L": model.L})


def ipca_total_r2(model: IPCAModel, returns: ReturnsPanel, chars: CharacteristicsPanel) -> float:
    """1 - SSR/SST over all active (Z_t, r_{t+1}) pairs, SST uncentered."""
    if model.factors.shape[1] != returns.T - 1:
        raise DimensionError("model factors do not match the panel length")
    R = np.asarray(returns.values)
    ssr = sst = 0.0
    for t in range(returns.T - 1):
        act = np.flatnonzero(chars.mask[t] & returns.mask[t + 1])
        r = R[t + 1, act]
        e = r - chars.Z[t, act] @ (model.Gamma @ model.factors[:, t])
        ssr += float(e @ e)
        sst += float(r @ r)
    if sst == 0.0:
        raise EstimationError("total sum of squares is zero")
    return 1.0 - ssr / sst
