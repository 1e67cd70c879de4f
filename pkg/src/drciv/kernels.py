"""Hot numerical kernels.

Each kernel has a loop implementation compiled with numba and a vectorized
numpy implementation.  ``_accel.USE_NUMBA`` picks which one the public names
point at; both stay importable so tests and the benchmark can compare them.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

BETA = 0.99995


# --------------------------------------------------------------------------
# Frisch-Newton interior point for check-loss minimization
#
# LP in the Koenker-Portnoy form: min c'x  s.t.  A x = b, 0 <= x <= 1 with
# A = X', c = -y, b = (1 - tau) X'1.  The dual vector of the equality block
# is minus the regression coefficient.
# --------------------------------------------------------------------------


@njit
def _chol_solve(M, rhs):
    p = M.shape[0]
    L = np.zeros((p, p))
    jitter = 0.0
    for attempt in range(6):
        ok = True
        for j in range(p):
            acc = M[j, j] + jitter
            for k in range(j):
                acc -= L[j, k] * L[j, k]
            if acc <= 0.0:
                ok = False
                break
            L[j, j] = np.sqrt(acc)
            for i in range(j + 1, p):
                acc2 = M[i, j]
                for k in range(j):
                    acc2 -= L[i, k] * L[j, k]
                L[i, j] = acc2 / L[j, j]
        if ok:
            break
        scale = 0.0
        for j in range(p):
            scale = max(scale, abs(M[j, j]))
        jitter = max(jitter * 100.0, 1e-14 * max(scale, 1e-300))
    out = np.empty(p)
    for i in range(p):
        acc = rhs[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]
    for i in range(p - 1, -1, -1):
        acc = out[i]
        for k in range(i + 1, p):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]
    return out


@njit
def _step_bound(v, dv):
    m = 1e20
    for i in range(v.shape[0]):
        if dv[i] < 0.0:
            r = -v[i] / dv[i]
            if r < m:
                m = r
    return m


@njit
def _fnb_numba(X, y, tau, tol, maxit):
    n, p = X.shape
    c = -y
    x = np.full(n, 1.0 - tau)
    s = 1.0 - x
    b = np.zeros(p)
    for i in range(n):
        for j in range(p):
            b[j] += (1.0 - tau) * X[i, j]

    ada = np.zeros((p, p))
    rhs = np.zeros(p)
    for i in range(n):
        for j in range(p):
            rhs[j] += X[i, j] * c[i]
            for k in range(p):
                ada[j, k] += X[i, j] * X[i, k]
    yy = _chol_solve(ada, rhs)

    r = np.empty(n)
    rmax = 0.0
    for i in range(n):
        acc = c[i]
        for j in range(p):
            acc -= X[i, j] * yy[j]
        r[i] = acc
        rmax = max(rmax, abs(acc))
    eps0 = 1e-6 * max(rmax, 1e-6)
    z = np.empty(n)
    w = np.empty(n)
    for i in range(n):
        z[i] = max(r[i], 0.0) + eps0
        w[i] = max(-r[i], 0.0) + eps0

    q = np.empty(n)
    dx = np.empty(n)
    ds = np.empty(n)
    dz = np.empty(n)
    dw = np.empty(n)

    cx = 0.0
    for i in range(n):
        cx += c[i] * x[i]
    gap = cx - np.dot(yy, b) + np.sum(w)
    it = 0
    while gap > tol * (1.0 + abs(cx)) and it < maxit:
        it += 1
        ada[:, :] = 0.0
        rhs[:] = 0.0
        for i in range(n):
            q[i] = 1.0 / (z[i] / x[i] + w[i] / s[i])
            r[i] = z[i] - w[i]
            for j in range(p):
                qx = q[i] * X[i, j]
                rhs[j] += qx * r[i]
                for k in range(j + 1):
                    ada[j, k] += qx * X[i, k]
        for j in range(p):
            for k in range(j + 1, p):
                ada[j, k] = ada[k, j]
        dy = _chol_solve(ada, rhs)
        for i in range(n):
            acc = 0.0
            for j in range(p):
                acc += X[i, j] * dy[j]
            dx[i] = q[i] * (acc - r[i])
            ds[i] = -dx[i]
            dz[i] = -z[i] * (dx[i] / x[i] + 1.0)
            dw[i] = -w[i] * (ds[i] / s[i] + 1.0)
        fp = min(_step_bound(x, dx), _step_bound(s, ds))
        fd = min(_step_bound(w, dw), _step_bound(z, dz))
        fp = min(BETA * fp, 1.0)
        fd = min(BETA * fd, 1.0)
        if min(fp, fd) < 1.0:
            mu = 0.0
            g = 0.0
            for i in range(n):
                mu += z[i] * x[i] + w[i] * s[i]
                g += (z[i] + fd * dz[i]) * (x[i] + fp * dx[i]) + (w[i] + fd * dw[i]) * (
                    s[i] + fp * ds[i]
                )
            mu = mu * (g / mu) ** 3 / (2.0 * n)
            for i in range(n):
                dxdz = dx[i] * dz[i]
                dsdw = ds[i] * dw[i]
                xi = mu * (1.0 / x[i] - 1.0 / s[i])
                t = q[i] * (dxdz - dsdw - xi)
                for j in range(p):
                    rhs[j] += X[i, j] * t
            dy = _chol_solve(ada, rhs)
            for i in range(n):
                acc = 0.0
                for j in range(p):
                    acc += X[i, j] * dy[j]
                dxdz = dx[i] * dz[i]
                dsdw = ds[i] * dw[i]
                xinv = 1.0 / x[i]
                sinv = 1.0 / s[i]
                xi = mu * (xinv - sinv)
                dx[i] = q[i] * (acc + xi - r[i] - dxdz + dsdw)
                ds[i] = -dx[i]
                dz[i] = mu * xinv - z[i] - xinv * z[i] * dx[i] - dxdz
                dw[i] = mu * sinv - w[i] - sinv * w[i] * ds[i] - dsdw
            fp = min(_step_bound(x, dx), _step_bound(s, ds))
            fd = min(_step_bound(w, dw), _step_bound(z, dz))
            fp = min(BETA * fp, 1.0)
            fd = min(BETA * fd, 1.0)
        cx = 0.0
        wsum = 0.0
        for i in range(n):
            x[i] += fp * dx[i]
            s[i] += fp * ds[i]
            z[i] += fd * dz[i]
            w[i] += fd * dw[i]
            cx += c[i] * x[i]
            wsum += w[i]
        for j in range(p):
            yy[j] += fd * dy[j]
        gap = cx - np.dot(yy, b) + wsum
    return -yy, gap, it, gap <= tol * (1.0 + abs(cx))


def _bound_np(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1e20
    return float(np.min(-v[neg] / dv[neg]))


def _fnb_numpy(X, y, tau, tol, maxit):
    n, p = X.shape
    A = X.T
    c = -y
    x = np.full(n, 1.0 - tau)
    s = 1.0 - x
    b = (1.0 - tau) * X.sum(axis=0)
    yy = np.linalg.solve(A @ X, A @ c)
    r = c - X @ yy
    eps0 = 1e-6 * max(np.abs(r).max(), 1e-6)
    z = np.maximum(r, 0.0) + eps0
    w = np.maximum(-r, 0.0) + eps0
    cx = c @ x
    gap = cx - yy @ b + w.sum()
    it = 0
    while gap > tol * (1.0 + abs(cx)) and it < maxit:
        it += 1
        q = 1.0 / (z / x + w / s)
        r = z - w
        ada = (A * q) @ X
        rhs = A @ (q * r)
        dy = np.linalg.solve(ada, rhs)
        dx = q * (X @ dy - r)
        ds = -dx
        dz = -z * (dx / x + 1.0)
        dw = -w * (ds / s + 1.0)
        fp = min(BETA * min(_bound_np(x, dx), _bound_np(s, ds)), 1.0)
        fd = min(BETA * min(_bound_np(w, dw), _bound_np(z, dz)), 1.0)
        if min(fp, fd) < 1.0:
            mu = z @ x + w @ s
            g = (z + fd * dz) @ (x + fp * dx) + (w + fd * dw) @ (s + fp * ds)
            mu = mu * (g / mu) ** 3 / (2.0 * n)
            dxdz = dx * dz
            dsdw = ds * dw
            xinv = 1.0 / x
            sinv = 1.0 / s
            xi = mu * (xinv - sinv)
            rhs = rhs + A @ (q * (dxdz - dsdw - xi))
            dy = np.linalg.solve(ada, rhs)
            dx = q * (X @ dy + xi - r - dxdz + dsdw)
            ds = -dx
            dz = mu * xinv - z - xinv * z * dx - dxdz
            dw = mu * sinv - w - sinv * w * ds - dsdw
            fp = min(BETA * min(_bound_np(x, dx), _bound_np(s, ds)), 1.0)
            fd = min(BETA * min(_bound_np(w, dw), _bound_np(z, dz)), 1.0)
        x = x + fp * dx
        s = s + fp * ds
        yy = yy + fd * dy
        w = w + fd * dw
        z = z + fd * dz
        cx = c @ x
        gap = cx - yy @ b + w.sum()
    return -yy, gap, it, gap <= tol * (1.0 + abs(cx))


# --------------------------------------------------------------------------
# Numerical derivative of the trimmed-weight objective
#
# For each coordinate j with direction column D[:, j] (the j-th entry of the
# shifted regressor Delta S_i), returns
#   n^-1 sum_i resid_i * (ind(dq_i + iota/2 D_ij) - ind(dq_i - iota/2 D_ij)) / iota
# where ind is the sign indicator selected by ``mode`` (0 abs, 1 positive,
# 2 negative).
# --------------------------------------------------------------------------


@njit
def _ind(a, rho, mode):
    if mode == 0:
        return (1.0 if a >= rho else 0.0) - (1.0 if a <= -rho else 0.0)
    if mode == 1:
        return 1.0 if a >= rho else 0.0
    return 1.0 if a <= -rho else 0.0


@njit
def _trim_grad_numba(dq, resid, D, rho, iota, mode):
    n, m = D.shape
    out = np.zeros(m)
    if iota <= 0.0:
        return out
    half = 0.5 * iota
    for j in range(m):
        acc = 0.0
        for i in range(n):
            d = D[i, j]
            if d == 0.0:
                continue
            up = _ind(dq[i] + half * d, rho, mode)
            dn = _ind(dq[i] - half * d, rho, mode)
            if up != dn:
                acc += resid[i] * (up - dn)
        out[j] = acc / (n * iota)
    return out


def _ind_np(a, rho, mode):
    if mode == 0:
        return (a >= rho).astype(float) - (a <= -rho).astype(float)
    if mode == 1:
        return (a >= rho).astype(float)
    return (a <= -rho).astype(float)


def _trim_grad_numpy(dq, resid, D, rho, iota, mode):
    n, m = D.shape
    if iota <= 0.0:
        return np.zeros(m)
    half = 0.5 * iota
    up = _ind_np(dq[:, None] + half * D, rho, mode)
    dn = _ind_np(dq[:, None] - half * D, rho, mode)
    return resid @ (up - dn) / (n * iota)


if USE_NUMBA:
    fnb = _fnb_numba
    trim_grad = _trim_grad_numba
else:
    fnb = _fnb_numpy
    trim_grad = _trim_grad_numpy
