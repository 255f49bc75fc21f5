"""Analytic portfolio solutions.

These serve as fast paths for the unconstrained (budget-only) problems and as
independent oracles for the QP layer. All linear solves go through a Cholesky
factorization; nothing here forms an explicit inverse.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DegenerateFrontierError, DimensionError, PortQPError, SingularMatrixError


def _factor(cov):
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionError(f"covariance must be square, got {cov.shape}")
    try:
        c, low = cho_factor(cov, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise SingularMatrixError("covariance is not positive definite") from exc
    diag = np.abs(np.diag(c))
    if diag.min() <= 1e-12 * diag.max():
        raise SingularMatrixError("covariance is numerically singular")
    return c, low


@dataclass(frozen=True)
class FrontierScalars:
    A: float  # mu' S^-1 1
    B: float  # mu' S^-1 mu
    C: float  # 1' S^-1 1
    D: float  # BC - A^2


def frontier_scalars(mu, cov) -> FrontierScalars:
    fac = _factor(cov)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (fac[0].shape[0],):
        raise DimensionError("mu does not match covariance")
    ones = np.ones_like(mu)
    si_1 = cho_solve(fac, ones)
    si_mu = cho_solve(fac, mu)
    A = float(mu @ si_1)
    B = float(mu @ si_mu)
    C = float(ones @ si_1)
    return FrontierScalars(A, B, C, B * C - A * A)


def min_variance_closed(cov):
    """Global minimum-variance weights S^-1 1 / C."""
    fac = _factor(cov)
    si_1 = cho_solve(fac, np.ones(fac[0].shape[0]))
    return si_1 / si_1.sum()


def mean_variance_closed(mu, cov, target):
    """Fully invested frontier portfolio with mean exactly ``target``."""
    fac = _factor(cov)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (fac[0].shape[0],):
        raise DimensionError("mu does not match covariance")
    ones = np.ones_like(mu)
    si_1 = cho_solve(fac, ones)
    si_mu = cho_solve(fac, mu)
    A = mu @ si_1
    B = mu @ si_mu
    C = ones @ si_1
    D = B * C - A * A
    if D <= 1e-12 * B * C:
        raise DegenerateFrontierError("mu is collinear with the ones vector (D ~ 0)")
    return (B * si_1 - A * si_mu + target * (C * si_mu - A * si_1)) / D


@dataclass(frozen=True)
class TangencyResult:
    weights: np.ndarray        # risky holdings for the requested target
    riskfree_fraction: float   # 1 - sum(weights)
    market: np.ndarray         # tangency (market) portfolio, sums to one


def tangency_with_riskfree(mu, cov, rf, target) -> TangencyResult:
    fac = _factor(cov)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (fac[0].shape[0],):
        raise DimensionError("mu does not match covariance")
    excess = mu - rf
    if np.max(np.abs(excess)) <= 1e-15 * max(1.0, abs(rf)):
        raise PortQPError("no excess return: mu equals rf for every asset")
    si_ex = cho_solve(fac, excess)
    h = excess @ si_ex
    denom = si_ex.sum()
    if abs(denom) <= 1e-14 * np.abs(si_ex).sum():
        raise PortQPError("market portfolio undefined: 1' S^-1 (mu - rf) = 0")
    w = (target - rf) / h * si_ex
    return TangencyResult(weights=w, riskfree_fraction=float(1.0 - w.sum()), market=si_ex / denom)
