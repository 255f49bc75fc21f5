"""Hot numeric loops.

Each kernel exists twice: a loop-form ``*_nb`` compiled with numba and a
vectorized ``*_np`` twin. Callers go through the dispatchers at the bottom of
the module, which consult :data:`portqp._accel.USE_NUMBA` at call time.
"""
import numpy as np

from . import _accel
from ._accel import njit

# ADMM status codes shared by both loop implementations.
RUNNING = 0
SOLVED = 1
PRIMAL_INFEASIBLE = 3
DUAL_INFEASIBLE = 4

_DIVISION_TOL = 1e-30


# ---------------------------------------------------------------------------
# Sparse LDL' of a quasi-definite matrix (upper triangle, CSC), QDLDL style.
# ---------------------------------------------------------------------------


@njit
def ldl_etree_nb(n, Ap, Ai):
    """Elimination tree and column counts of L for an upper-triangular CSC."""
    work = np.full(n, -1, dtype=np.int64)
    lnz = np.zeros(n, dtype=np.int64)
    etree = np.full(n, -1, dtype=np.int64)
    for j in range(n):
        work[j] = j
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            if i > j:
                return etree, lnz, False
            while work[i] != j:
                if etree[i] == -1:
                    etree[i] = j
                lnz[i] += 1
                work[i] = j
                i = etree[i]
    return etree, lnz, True


@njit
def ldl_factor_nb(n, Ap, Ai, Ax, etree, lnz):
    """Numeric LDL'. Returns (Lp, Li, Lx, D, Dinv, ok)."""
    Lp = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        Lp[i + 1] = Lp[i] + lnz[i]
    Li = np.zeros(Lp[n], dtype=np.int64)
    Lx = np.zeros(Lp[n])
    D = np.zeros(n)
    Dinv = np.zeros(n)
    marked = np.zeros(n, dtype=np.bool_)
    yvals = np.zeros(n)
    yidx = np.zeros(n, dtype=np.int64)
    elim = np.zeros(n, dtype=np.int64)
    nxt_space = Lp[:n].copy()

    for k in range(n):
        nnz_y = 0
        for p in range(Ap[k], Ap[k + 1]):
            b = Ai[p]
            if b == k:
                D[k] = Ax[p]
                continue
            yvals[b] = Ax[p]
            nxt = b
            if not marked[nxt]:
                marked[nxt] = True
                elim[0] = nxt
                nnz_e = 1
                nxt = etree[b]
                while nxt != -1 and nxt < k:
                    if marked[nxt]:
                        break
                    marked[nxt] = True
                    elim[nnz_e] = nxt
                    nnz_e += 1
                    nxt = etree[nxt]
                while nnz_e > 0:
                    nnz_e -= 1
                    yidx[nnz_y] = elim[nnz_e]
                    nnz_y += 1
        for ii in range(nnz_y - 1, -1, -1):
            c = yidx[ii]
            slot = nxt_space[c]
            yc = yvals[c]
            for j in range(Lp[c], slot):
                yvals[Li[j]] -= Lx[j] * yc
            Li[slot] = k
            Lx[slot] = yc * Dinv[c]
            D[k] -= yc * Lx[slot]
            nxt_space[c] += 1
            yvals[c] = 0.0
            marked[c] = False
        if D[k] == 0.0:
            return Lp, Li, Lx, D, Dinv, False
        Dinv[k] = 1.0 / D[k]
    return Lp, Li, Lx, D, Dinv, True


@njit
def ldl_solve_nb(n, Lp, Li, Lx, Dinv, x):
    """Overwrite ``x`` with the solution of L D L' x = x."""
    for i in range(n):
        xi = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            x[Li[j]] -= Lx[j] * xi
    for i in range(n):
        x[i] *= Dinv[i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            s -= Lx[j] * x[Li[j]]
        x[i] = s


# ---------------------------------------------------------------------------
# ADMM iterations on a scaled QP (OSQP-type splitting).
# ---------------------------------------------------------------------------


@njit
def _csr_matvec(indptr, indices, data, v, out):
    for i in range(out.shape[0]):
        s = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            s += data[p] * v[indices[p]]
        out[i] = s


@njit
def _inf_norm_scaled(v, s):
    r = 0.0
    for i in range(v.shape[0]):
        a = abs(v[i] * s[i])
        if a > r:
            r = a
    return r


@njit
def _converged_nb(x, z, y, q, l, u, Pp, Pi, Px, Ap, Ai, Ax, Atp, Ati, Atx,
                  Dinv_s, Einv, c_inv, eps_abs, eps_rel, ax, px, aty):
    n = x.shape[0]
    m = z.shape[0]
    _csr_matvec(Ap, Ai, Ax, x, ax)
    _csr_matvec(Pp, Pi, Px, x, px)
    _csr_matvec(Atp, Ati, Atx, y, aty)
    prim = 0.0
    prim_scale = 0.0
    for i in range(m):
        r = abs((ax[i] - z[i]) * Einv[i])
        if r > prim:
            prim = r
        a = abs(ax[i] * Einv[i])
        if a > prim_scale:
            prim_scale = a
        a = abs(z[i] * Einv[i])
        if a > prim_scale:
            prim_scale = a
    dual = 0.0
    dual_scale = 0.0
    for j in range(n):
        r = abs((px[j] + q[j] + aty[j]) * Dinv_s[j])
        if r > dual:
            dual = r
        for a in (abs(px[j] * Dinv_s[j]), abs(aty[j] * Dinv_s[j]), abs(q[j] * Dinv_s[j])):
            if a > dual_scale:
                dual_scale = a
    dual *= c_inv
    dual_scale *= c_inv
    ok = prim <= eps_abs + eps_rel * prim_scale and dual <= eps_abs + eps_rel * dual_scale
    return ok, prim, dual, prim_scale, dual_scale


@njit
def _primal_infeasible_nb(dy, l, u, E, Atp, Ati, Atx, Dinv_s, eps, aty):
    m = dy.shape[0]
    for i in range(m):
        if u[i] == np.inf:
            if l[i] == -np.inf:
                dy[i] = 0.0
            elif dy[i] > 0.0:
                dy[i] = 0.0
        elif l[i] == -np.inf and dy[i] < 0.0:
            dy[i] = 0.0
    norm = _inf_norm_scaled(dy, E)
    if norm <= _DIVISION_TOL:
        return False
    support = 0.0
    for i in range(m):
        d = dy[i] / norm
        if d > 0.0:
            support += u[i] * d
        elif d < 0.0:
            support += l[i] * d
    if not support < -eps:
        return False
    _csr_matvec(Atp, Ati, Atx, dy, aty)
    return _inf_norm_scaled(aty, Dinv_s) / norm < eps


@njit
def _dual_infeasible_nb(dx, q, l, u, D, Einv, c_inv, Pp, Pi, Px, Ap, Ai, Ax, eps,
                        px, ax):
    norm = _inf_norm_scaled(dx, D)
    if norm <= _DIVISION_TOL:
        return False
    qdx = 0.0
    for j in range(dx.shape[0]):
        qdx += q[j] * dx[j]
    if not qdx * c_inv / norm < -eps:
        return False
    _csr_matvec(Pp, Pi, Px, dx, px)
    Dinv_s = 1.0 / D
    if _inf_norm_scaled(px, Dinv_s) * c_inv / norm >= eps:
        return False
    _csr_matvec(Ap, Ai, Ax, dx, ax)
    for i in range(ax.shape[0]):
        v = ax[i] * Einv[i] / norm
        if u[i] < np.inf and v >= eps:
            return False
        if l[i] > -np.inf and v <= -eps:
            return False
    return True


@njit
def admm_iterate_nb(Lp, Li, Lx, Dinv, perm,
                    Pp, Pi, Px, Ap, Ai, Ax, Atp, Ati, Atx,
                    q, l, u, rho, sigma, alpha,
                    D, E, c_inv, eps_abs, eps_rel, eps_pinf, eps_dinf,
                    x, z, y, k_start, k_stop, check_every):
    """Run ADMM iterations k_start..k_stop-1 in place.

    Returns (status, k_done, prim_res, dual_res, prim_scale, dual_scale).
    Residuals are in unscaled units; the scales are the normalizers used by
    the termination test, reused for rho adaptation.
    """
    n = x.shape[0]
    m = z.shape[0]
    nk = n + m
    rho_inv = 1.0 / rho
    Dinv_s = 1.0 / D
    Einv = 1.0 / E
    rhs = np.zeros(nk)
    sol = np.zeros(nk)
    ax = np.zeros(m)
    px = np.zeros(n)
    aty = np.zeros(n)
    dx = np.zeros(n)
    dy = np.zeros(m)
    prim = np.inf
    dual = np.inf
    pscale = 0.0
    dscale = 0.0
    k = k_start
    while k < k_stop:
        for j in range(n):
            rhs[j] = sigma * x[j] - q[j]
        for i in range(m):
            rhs[n + i] = z[i] - rho_inv[i] * y[i]
        for t in range(nk):
            sol[t] = rhs[perm[t]]
        ldl_solve_nb(nk, Lp, Li, Lx, Dinv, sol)
        for t in range(nk):
            rhs[perm[t]] = sol[t]
        for j in range(n):
            xn = alpha * rhs[j] + (1.0 - alpha) * x[j]
            dx[j] = xn - x[j]
            x[j] = xn
        for i in range(m):
            zt = z[i] + rho_inv[i] * (rhs[n + i] - y[i])
            zr = alpha * zt + (1.0 - alpha) * z[i]
            zn = zr + rho_inv[i] * y[i]
            if zn < l[i]:
                zn = l[i]
            elif zn > u[i]:
                zn = u[i]
            step = rho[i] * (zr - zn)
            dy[i] = step
            y[i] += step
            z[i] = zn
        k += 1
        if k % check_every == 0 or k == k_stop:
            ok, prim, dual, pscale, dscale = _converged_nb(
                x, z, y, q, l, u, Pp, Pi, Px, Ap, Ai, Ax, Atp, Ati, Atx,
                Dinv_s, Einv, c_inv, eps_abs, eps_rel, ax, px, aty)
            if ok:
                return SOLVED, k, prim, dual, pscale, dscale
            if m > 0 and _primal_infeasible_nb(dy, l, u, E, Atp, Ati, Atx, Dinv_s,
                                               eps_pinf, aty):
                return PRIMAL_INFEASIBLE, k, prim, dual, pscale, dscale
            if _dual_infeasible_nb(dx, q, l, u, D, Einv, c_inv, Pp, Pi, Px, Ap, Ai,
                                   Ax, eps_dinf, px, ax):
                return DUAL_INFEASIBLE, k, prim, dual, pscale, dscale
    return RUNNING, k, prim, dual, pscale, dscale


def _converged_np(x, z, y, q, P, A, Dinv_s, Einv, c_inv, eps_abs, eps_rel):
    ax = A @ x
    px = P @ x
    aty = A.T @ y
    if z.size:
        prim = np.max(np.abs((ax - z) * Einv))
        pscale = max(np.max(np.abs(ax * Einv)), np.max(np.abs(z * Einv)))
    else:
        prim = pscale = 0.0
    dual = c_inv * np.max(np.abs((px + q + aty) * Dinv_s))
    dscale = c_inv * max(np.max(np.abs(px * Dinv_s)), np.max(np.abs(aty * Dinv_s)),
                         np.max(np.abs(q * Dinv_s)))
    ok = prim <= eps_abs + eps_rel * pscale and dual <= eps_abs + eps_rel * dscale
    return ok, prim, dual, pscale, dscale


def _primal_infeasible_np(dy, l, u, E, A, Dinv_s, eps):
    dy = dy.copy()
    up_inf = u == np.inf
    lo_inf = l == -np.inf
    dy[up_inf & lo_inf] = 0.0
    dy[up_inf & ~lo_inf] = np.minimum(dy[up_inf & ~lo_inf], 0.0)
    dy[lo_inf & ~up_inf] = np.maximum(dy[lo_inf & ~up_inf], 0.0)
    norm = np.max(np.abs(dy * E))
    if norm <= _DIVISION_TOL:
        return False
    d = dy / norm
    pos, neg = d > 0, d < 0
    support = np.sum(u[pos] * d[pos]) + np.sum(l[neg] * d[neg])
    if not support < -eps:
        return False
    return np.max(np.abs((A.T @ dy) * Dinv_s)) / norm < eps


def _dual_infeasible_np(dx, q, l, u, D, Einv, c_inv, P, A, eps):
    norm = np.max(np.abs(dx * D))
    if norm <= _DIVISION_TOL:
        return False
    if not q @ dx * c_inv / norm < -eps:
        return False
    if np.max(np.abs((P @ dx) / D)) * c_inv / norm >= eps:
        return False
    v = (A @ dx) * Einv / norm
    if np.any((u < np.inf) & (v >= eps)) or np.any((l > -np.inf) & (v <= -eps)):
        return False
    return True


def admm_iterate_np(solve, P, A, q, l, u, rho, sigma, alpha, D, E, c_inv,
                    eps_abs, eps_rel, eps_pinf, eps_dinf, x, z, y,
                    k_start, k_stop, check_every):
    """Numpy twin of :func:`admm_iterate_nb`; ``solve`` applies the KKT inverse."""
    n = x.size
    rho_inv = 1.0 / rho
    Dinv_s = 1.0 / D
    Einv = 1.0 / E
    prim = dual = np.inf
    pscale = dscale = 0.0
    k = k_start
    while k < k_stop:
        sol = solve(np.concatenate((sigma * x - q, z - rho_inv * y)))
        xn = alpha * sol[:n] + (1.0 - alpha) * x
        zt = z + rho_inv * (sol[n:] - y)
        zr = alpha * zt + (1.0 - alpha) * z
        zn = np.clip(zr + rho_inv * y, l, u)
        dy = rho * (zr - zn)
        dx = xn - x
        x[:] = xn
        y += dy
        z[:] = zn
        k += 1
        if k % check_every == 0 or k == k_stop:
            ok, prim, dual, pscale, dscale = _converged_np(
                x, z, y, q, P, A, Dinv_s, Einv, c_inv, eps_abs, eps_rel)
            if ok:
                return SOLVED, k, prim, dual, pscale, dscale
            if z.size and _primal_infeasible_np(dy, l, u, E, A, Dinv_s, eps_pinf):
                return PRIMAL_INFEASIBLE, k, prim, dual, pscale, dscale
            if _dual_infeasible_np(dx, q, l, u, D, Einv, c_inv, P, A, eps_dinf):
                return DUAL_INFEASIBLE, k, prim, dual, pscale, dscale
    return RUNNING, k, prim, dual, pscale, dscale


# ---------------------------------------------------------------------------
# Equal risk contribution: cyclic coordinate descent on
#   1/2 x'Sx - b' log x,  stationary point x_i (Sx)_i = b_i.
# ---------------------------------------------------------------------------


@njit
def erc_ccd_nb(cov, b, x, tol, max_iter):
    n = x.size
    sx = cov @ x
    err = np.inf
    it = 0
    while it < max_iter:
        it += 1
        for i in range(n):
            sii = cov[i, i]
            c = sx[i] - sii * x[i]
            new = (-c + np.sqrt(c * c + 4.0 * sii * b[i])) / (2.0 * sii)
            d = new - x[i]
            if d != 0.0:
                for j in range(n):
                    sx[j] += cov[j, i] * d
                x[i] = new
        err = 0.0
        for i in range(n):
            e = abs(x[i] * sx[i] - b[i]) / b[i]
            if e > err:
                err = e
        if err <= tol:
            break
        # periodic exact refresh of S x against drift
        if it % 50 == 0:
            sx = cov @ x
    return x, it, err


def erc_ccd_np(cov, b, x, tol, max_iter):
    x = x.copy()
    sx = cov @ x
    diag = np.diag(cov).copy()
    err = np.inf
    it = 0
    while it < max_iter:
        it += 1
        for i in range(x.size):
            c = sx[i] - diag[i] * x[i]
            new = (-c + np.sqrt(c * c + 4.0 * diag[i] * b[i])) / (2.0 * diag[i])
            d = new - x[i]
            if d != 0.0:
                sx += cov[:, i] * d
                x[i] = new
        err = float(np.max(np.abs(x * sx - b) / b))
        if err <= tol:
            break
        if it % 50 == 0:
            sx = cov @ x
    return x, it, err


# ---------------------------------------------------------------------------
# Underwater curve of a compounded return series (initial equity 1).
# ---------------------------------------------------------------------------


@njit
def underwater_nb(returns):
    n = returns.size
    out = np.empty(n)
    eq = 1.0
    peak = 1.0
    for t in range(n):
        eq *= 1.0 + returns[t]
        if eq > peak:
            peak = eq
        out[t] = eq / peak - 1.0
    return out


def underwater_np(returns):
    eq = np.cumprod(1.0 + returns)
    peak = np.maximum(np.maximum.accumulate(eq), 1.0)
    return eq / peak - 1.0


# ---------------------------------------------------------------------------
# IPCA alternating least squares pieces. W[t] = Z_t'Z_t, X[t] = Z_t'r_{t+1}.
# ---------------------------------------------------------------------------


@njit
def ipca_factors_nb(W, X, gamma, ridge):
    T = W.shape[0]
    K = gamma.shape[1]
    F = np.zeros((T, K))
    flags = np.zeros(T, dtype=np.bool_)
    for t in range(T):
        M = gamma.T @ W[t] @ gamma
        rhs = gamma.T @ X[t]
        scale = 0.0
        for k in range(K):
            scale = max(scale, abs(M[k, k]))
        if scale == 0.0:
            flags[t] = True
            continue
        # reciprocal condition estimate via the eigenvalue ratio
        ev = np.linalg.eigvalsh(M)
        if ev[0] <= 1e-12 * ev[-1]:
            flags[t] = True
            for k in range(K):
                M[k, k] += ridge * scale
        F[t] = np.linalg.solve(M, rhs)
    return F, flags


def ipca_factors_np(W, X, gamma, ridge):
    M = np.einsum("lk,tlm,mj->tkj", gamma, W, gamma)
    rhs = X @ gamma
    K = gamma.shape[1]
    scale = np.max(np.abs(np.diagonal(M, axis1=1, axis2=2)), axis=1) if K else np.zeros(len(W))
    ev = np.linalg.eigvalsh(M)
    flags = (scale == 0.0) | (ev[:, 0] <= 1e-12 * ev[:, -1])
    if flags.any():
        M = M.copy()
        M[flags] += (ridge * scale[flags])[:, None, None] * np.eye(K)
    F = np.zeros((len(W), K))
    ok = scale > 0.0
    if ok.any():
        F[ok] = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
    return F, flags


@njit
def ipca_gamma_system_nb(W, X, F):
    # sum_t W_t kron f_t f_t' as one (L^2 x T)(T x K^2) product, then a block permute
    T, L, _ = W.shape
    K = F.shape[1]
    FF = np.empty((T, K * K))
    for t in range(T):
        for k in range(K):
            for m in range(K):
                FF[t, k * K + m] = F[t, k] * F[t, m]
    G = np.dot(np.ascontiguousarray(W.reshape(T, L * L).T), FF)
    M = np.empty((L * K, L * K))
    for i in range(L):
        for j in range(L):
            for k in range(K):
                for m in range(K):
                    M[i * K + k, j * K + m] = G[i * L + j, k * K + m]
    b = np.dot(np.ascontiguousarray(X.T), F).reshape(L * K)
    return M, b


def ipca_gamma_system_np(W, X, F):
    T, L, _ = W.shape
    K = F.shape[1]
    M = np.einsum("tij,tk,tm->ikjm", W, F, F, optimize=True).reshape(L * K, L * K)
    b = np.einsum("ti,tk->ik", X, F).reshape(L * K)
    return M, b


# ---------------------------------------------------------------------------
# Dispatchers
# ---------------------------------------------------------------------------


def erc_ccd(cov, b, x, tol, max_iter):
    cov = np.ascontiguousarray(cov, dtype=np.float64)
    if _accel.USE_NUMBA:
        return erc_ccd_nb(cov, np.asarray(b, np.float64), np.array(x, np.float64), tol, max_iter)
    return erc_ccd_np(cov, b, x, tol, max_iter)


def underwater(returns):
    r = np.ascontiguousarray(returns, dtype=np.float64)
    return underwater_nb(r) if _accel.USE_NUMBA else underwater_np(r)


def ipca_factors(W, X, gamma, ridge=1e-10):
    args = (np.ascontiguousarray(W), np.ascontiguousarray(X), np.ascontiguousarray(gamma))
    if _accel.USE_NUMBA:
        return ipca_factors_nb(*args, ridge)
    return ipca_factors_np(*args, ridge)


def ipca_gamma_system(W, X, F):
    args = (np.ascontiguousarray(W), np.ascontiguousarray(X), np.ascontiguousarray(F))
    return ipca_gamma_system_nb(*args) if _accel.USE_NUMBA else ipca_gamma_system_np(*args)
