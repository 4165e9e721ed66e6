"""Numba kernels for the small dense solves done per factor and per variable."""

import numpy as np
from numba import njit

RTOL = 1e-12


@njit(cache=True)
def _cholesky(A, L, rtol):
    d = A.shape[0]
    scale = 0.0
    for c in range(d):
        scale = max(scale, abs(A[c, c]))
    if scale == 0.0:
        return False
    for c in range(d):
        s = A[c, c]
        for j in range(c):
            s -= L[c, j] * L[c, j]
        if not s > rtol * scale:
            return False
        L[c, c] = np.sqrt(s)
        for r in range(c + 1, d):
            s = A[r, c]
            for j in range(c):
                s -= L[r, j] * L[c, j]
            L[r, c] = s / L[c, c]
    return True


@njit(cache=True)
def _cho_solve(L, b, x, y):
    d = L.shape[0]
    for r in range(d):
        s = b[r]
        for j in range(r):
            s -= L[r, j] * y[j]
        y[r] = s / L[r, r]
    for r in range(d - 1, -1, -1):
        s = y[r]
        for j in range(r + 1, d):
            s -= L[j, r] * x[j]
        x[r] = s / L[r, r]


@njit(cache=True)
def solve_pd(A, b, rtol=RTOL):
    """Batched solve A x = b for symmetric PD A[n,d,d], b[n,d].

    Items whose A fails the Cholesky pivot test get x = 0 and ok = False.
    """
    n, d = b.shape
    x = np.zeros((n, d))
    ok = np.zeros(n, np.bool_)
    L = np.zeros((d, d))
    y = np.zeros(d)
    for i in range(n):
        if _cholesky(A[i], L, rtol):
            ok[i] = True
            _cho_solve(L, b[i], x[i], y)
    return x, ok


@njit(cache=True)
def pd_mask(A, rtol=RTOL):
    n, d, _ = A.shape
    ok = np.zeros(n, np.bool_)
    L = np.zeros((d, d))
    for i in range(n):
        ok[i] = _cholesky(A[i], L, rtol)
    return ok


@njit(cache=True)
def schur_slot(pot_lam, pot_eta, full_lam, full_eta, start, k, rtol=RTOL):
    """Marginal of a factor joint onto the contiguous block [start, start+k).

    The kept block uses the bare potential; the eliminated block uses the
    joint including incoming messages. Returns eta[n,k], lam[n,k,k], ok[n].
    """
    n, D = pot_eta.shape
    e = D - k
    eta = np.zeros((n, k))
    lam = np.zeros((n, k, k))
    ok = np.zeros(n, np.bool_)
    idx = np.empty(e, np.int64)
    j = 0
    for i in range(D):
        if i < start or i >= start + k:
            idx[j] = i
            j += 1
    Lee = np.empty((e, e))
    L = np.zeros((e, e))
    col = np.empty(e)
    sol = np.empty((e, k + 1))
    y = np.empty(e)
    xs = np.empty(e)
    for m in range(n):
        for a in range(e):
            for b in range(e):
                Lee[a, b] = full_lam[m, idx[a], idx[b]]
        if not _cholesky(Lee, L, rtol):
            continue
        ok[m] = True
        for c in range(k + 1):
            for a in range(e):
                if c < k:
                    col[a] = full_lam[m, idx[a], start + c]
                else:
                    col[a] = full_eta[m, idx[a]]
            _cho_solve(L, col, xs, y)
            for a in range(e):
                sol[a, c] = xs[a]
        for r in range(k):
            s = pot_eta[m, start + r]
            for a in range(e):
                s -= full_lam[m, start + r, idx[a]] * sol[a, k]
            eta[m, r] = s
            for c in range(k):
                s = pot_lam[m, start + r, start + c]
                for a in range(e):
                    s -= full_lam[m, start + r, idx[a]] * sol[a, c]
                lam[m, r, c] = s
        for r in range(k):
            for c in range(r + 1, k):
                v = 0.5 * (lam[m, r, c] + lam[m, c, r])
                lam[m, r, c] = v
                lam[m, c, r] = v
    return eta, lam, ok
