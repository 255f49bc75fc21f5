"""Covariance estimators.

``sample_cov``        1/T-normalized sample covariance.
``linear_shrinkage``  delta*F + (1 - delta)*S toward F = trace(S)/N * I with a
                      plug-in intensity built from pi, rho and gamma sums.
``qis_shrinkage``     nonlinear shrinkage of the sample spectrum that keeps the
                      sample eigenvectors.
``repair_singular``   eigenvalue floor for singular or near-singular inputs.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, fmt_float, read_json, write_json
from .errors import DataError, DimensionError, EstimationError, SingularMatrixError

ESTIMATORS = ("Sample", "LinearShrinkage", "QIS", "IPCA")


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    matrix: np.ndarray
    estimator: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"covariance must be square, got {m.shape}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator tag {self.estimator!r}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self):
        return self.matrix.shape[0]

    def to_csv(self, path, asset_ids=None, diagnostics_path=None):
        ids = list(asset_ids) if asset_ids is not None else [f"a{i}" for i in range(self.n)]
        if len(ids) != self.n:
            raise DimensionError("asset_ids length does not match the matrix")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["asset_id"] + ids)
        for a, row in zip(ids, self.matrix):
            w.writerow([a] + [fmt_float(v) for v in row])
        atomic_write_text(path, buf.getvalue())
        if diagnostics_path is not None:
            write_json(diagnostics_path, {"estimator": self.estimator, "n": self.n,
                                          "diagnostics": self.diagnostics})

    @classmethod
    def from_csv(cls, path, diagnostics_path=None):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "asset_id":
            raise DataError(f"{path}: expected header starting with asset_id")
        ids = rows[0][1:]
        mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        est, diag = "Sample", {}
        if diagnostics_path is not None:
            meta = read_json(diagnostics_path)
            est, diag = meta["estimator"], meta.get("diagnostics", {})
        return cls(mat, est, diag), ids


def _panel(returns, min_t=2):
    X = np.asarray(returns, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionError(f"returns must be T x N, got shape {X.shape}")
    if X.shape[0] < min_t:
        raise EstimationError(f"need at least {min_t} periods, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise DataError("returns contain missing or non-finite entries")
    return X


def _sym(m):
    return 0.5 * (m + m.T)


def sample_cov(returns) -> CovarianceEstimate:
    X = _panel(returns)
    Xc = X - X.mean(axis=0)
    S = _sym(Xc.T @ Xc / X.shape[0])
    return CovarianceEstimate(S, "Sample", {"T": X.shape[0], "N": X.shape[1]})


def linear_shrinkage(returns) -> CovarianceEstimate:
    """Shrink S toward (trace(S)/N) I with intensity clamp(kappa/T, 0, 1).

    pi   = sum_ij mean_t (y_ijt - s_ij)^2,   y_ijt = (r_it - rbar_i)(r_jt - rbar_j)
    rho  = sum_i pi_ii + sum_{i!=j} rbar/2 (sqrt(s_jj/s_ii) theta_ii,ij
                                          + sqrt(s_ii/s_jj) theta_jj,ij)
    gamma = ||F - S||_F^2,   kappa = (pi - rho) / gamma
    with rbar the average off-diagonal sample correlation.
    """
    X = _panel(returns)
    T, N = X.shape
    Xc = X - X.mean(axis=0)
    S = _sym(Xc.T @ Xc / T)
    s = np.diag(S).copy()
    mu_f = np.trace(S) / N
    F = mu_f * np.eye(N)

    X2 = Xc * Xc
    pi_mat = X2.T @ X2 / T - S * S
    pi_hat = float(pi_mat.sum())

    pos = s > 0
    sd = np.sqrt(np.where(pos, s, 1.0))
    if N > 1 and pos.sum() > 1:
        corr = S / np.outer(sd, sd)
        mask = np.outer(pos, pos) & ~np.eye(N, dtype=bool)
        rbar = float(corr[mask].mean())
    else:
        rbar = 0.0
    theta = (X2 * Xc).T @ Xc / T - s[:, None] * S  # theta[i, j] = theta_ii,ij
    ratio = np.where(np.outer(pos, pos), sd[None, :] / sd[:, None], 0.0)  # sqrt(s_jj/s_ii)
    off = ratio * theta + ratio.T * theta.T
    np.fill_diagonal(off, 0.0)
    rho_hat = float(np.trace(pi_mat) + rbar / 2.0 * off.sum())
    gamma_hat = float(np.sum((F - S) ** 2))

    flagged = gamma_hat <= 0.0
    if flagged:
        kappa = np.inf
        delta = 1.0
    else:
        kappa = (pi_hat - rho_hat) / gamma_hat
        delta = float(max(0.0, min(kappa / T, 1.0)))
    if delta == 0.0:
        M = S.copy()
    elif delta == 1.0:
        M = F.copy()
    else:
        M = _sym(delta * F + (1.0 - delta) * S)
    diag = {"delta": delta, "kappa": kappa, "pi": pi_hat, "rho": rho_hat, "gamma": gamma_hat,
            "rbar": rbar, "target_scale": mu_f, "gamma_zero": flagged, "T": T, "N": N}
    return CovarianceEstimate(M, "LinearShrinkage", diag)


def _analytical_spectrum(lam, n, p):
    """Shrunk eigenvalues via an Epanechnikov kernel density of the sample
    spectrum and its Hilbert transform (bandwidth h*lambda_j, h = n^(-1/3)).

    ``lam`` holds the nonzero sample eigenvalues in ascending order.
    """
    h = n ** (-1.0 / 3.0)
    L = lam[:, None]
    H = h * lam[None, :]
    x = (L - lam[None, :]) / H
    r5 = np.sqrt(5.0)
    f_tilde = (3.0 / 4.0 / r5) * np.mean(np.maximum(1.0 - x * x / 5.0, 0.0) / H, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.log(np.abs((r5 - x) / (r5 + x)))
    hf = (-3.0 / 10.0 / np.pi) * x + (3.0 / 4.0 / r5 / np.pi) * (1.0 - x * x / 5.0) * log_term
    edge = np.isclose(np.abs(x), r5, rtol=0.0, atol=1e-14)
    hf[edge] = (-3.0 / 10.0 / np.pi) * x[edge]
    Hf_tilde = np.mean(hf / H, axis=1)
    if p <= n:
        c = p / n
        d = lam / ((np.pi * c * lam * f_tilde) ** 2 + (1.0 - c - np.pi * c * lam * Hf_tilde) ** 2)
        return d, {"f_tilde": f_tilde, "Hf_tilde": Hf_tilde, "bandwidth": h}
    # |.| inside the log as in the kernel term above; without it the value is
    # undefined once sqrt(5) h > 1, i.e. for n below about 11
    with np.errstate(divide="ignore"):
        log0 = np.log(np.abs((1.0 + r5 * h) / (1.0 - r5 * h)))
    Hf0 = (1.0 / np.pi) * (3.0 / 10.0 / h ** 2 + 3.0 / 4.0 / r5 / h * (1.0 - 1.0 / 5.0 / h ** 2)
                           * log0) * np.mean(1.0 / lam)
    d0 = 1.0 / (np.pi * (p - n) / n * Hf0)
    d1 = lam / (np.pi ** 2 * lam ** 2 * (f_tilde ** 2 + Hf_tilde ** 2))
    d = np.concatenate((np.full(p - n, d0), d1))
    return d, {"f_tilde": f_tilde, "Hf_tilde": Hf_tilde, "bandwidth": h, "null_value": d0}


def _quadratic_inverse_spectrum(lam_all, n, p):
    """Shrunk eigenvalues from the quadratic-inverse formula on 1/lambda."""
    c = p / n
    h = min(c ** 2, 1.0 / c ** 2) ** 0.35 / p ** 0.35
    inv = 1.0 / lam_all[max(0, p - n):]
    Lj = inv[:, None]
    Lij = Lj - inv[None, :]
    den = Lij * Lij + h * h * Lj * Lj
    theta = np.mean(Lj * Lij / den, axis=0)
    Htheta = np.mean(Lj * (h * Lj) / den, axis=0)
    A2 = theta ** 2 + Htheta ** 2
    if p <= n:
        d = 1.0 / ((1 - c) ** 2 * inv + 2 * c * (1 - c) * inv * theta + c ** 2 * inv * A2)
    else:
        d0 = 1.0 / ((c - 1.0) * np.mean(inv))
        d = np.concatenate((np.full(p - n, d0), 1.0 / (inv * A2)))
    d = d * (lam_all.sum() / d.sum())
    return d, {"theta": theta, "Htheta": Htheta, "bandwidth": h}


def qis_shrinkage(returns, method="analytical") -> CovarianceEstimate:
    """Nonlinear shrinkage U diag(d(lambda)) U' of the demeaned sample covariance.

    ``method="analytical"`` (default) uses the kernel/Hilbert-transform
    estimator; ``"quadratic_inverse"`` the quadratic-inverse variant. Both keep
    the sample eigenvectors U. The effective sample size is T - 1.
    """
    X = _panel(returns)
    T, p = X.shape
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise EstimationError("degenerate panel: all demeaned returns are zero")
    n = T - 1
    if n < 1:
        raise EstimationError("need at least 2 periods")
    S = _sym(Xc.T @ Xc / n)
    lam, U = np.linalg.eigh(S)
    lam = np.maximum(lam, 0.0)
    k = min(p, n)
    nz = lam[p - k:]
    if np.any(nz <= 0.0):
        raise EstimationError("sample covariance has fewer nonzero eigenvalues than min(N, T-1)")
    if method == "analytical":
        d, extra = _analytical_spectrum(nz, n, p)
    elif method == "quadratic_inverse":
        d, extra = _quadratic_inverse_spectrum(lam, n, p)
    else:
        raise ValueError(f"unknown QIS method {method!r}")
    if not np.all(np.isfinite(d)):
        raise EstimationError("shrinkage function produced non-finite values")
    d = np.maximum(d, 0.0)
    M = _sym((U * d) @ U.T)
    diag = {"method": method, "sample_eigenvalues": lam, "shrunk_eigenvalues": d,
            "effective_n": n, "concentration": p / n}
    diag.update(extra)
    return CovarianceEstimate(M, "QIS", diag)


def repair_singular(estimate: CovarianceEstimate, floor_ratio: float = 1e-8) -> CovarianceEstimate:
    """Raise eigenvalues below ``floor_ratio * lambda_max`` to that floor."""
    if not floor_ratio > 0:
        raise ValueError("floor_ratio must be positive")
    M = np.asarray(estimate.matrix)
    lam, U = np.linalg.eigh(_sym(M))
    top = lam[-1]
    if not top > 0:
        raise SingularMatrixError("largest eigenvalue is not positive")
    floor = floor_ratio * top
    raised = int(np.sum(lam < floor))
    diag = dict(estimate.diagnostics)
    diag.update({"repair_floor": floor, "repaired_eigenvalues": raised})
    if raised == 0:
        return CovarianceEstimate(M.copy(), estimate.estimator, diag)
    out = _sym((U * np.maximum(lam, floor)) @ U.T)
    return CovarianceEstimate(out, estimate.estimator, diag)


def estimate_factor_betas(returns, factors):
    """Per-asset OLS of returns on [1, factors]; returns (alphas, betas, residuals)."""
    R = _panel(returns, min_t=1)
    F = np.asarray(factors, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    T, K = F.shape
    if R.shape[0] != T:
        raise DimensionError(f"returns have {R.shape[0]} periods, factors {T}")
    if not T > K + 1:
        raise EstimationError(f"need T > K + 1 (T={T}, K={K})")
    Xd = np.column_stack((np.ones(T), F))
    if np.linalg.matrix_rank(Xd) < K + 1:
        raise SingularMatrixError("factor design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(Xd, R, rcond=None)
    resid = R - Xd @ coef
    return coef[0], coef[1:].T, resid
