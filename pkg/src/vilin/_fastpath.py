"""Compiled Newton loop for unconstrained steps and batched graph evaluation.

``newton_unconstrained`` mirrors the Python loop of
:func:`vilin.integrator.step` (same residual, Jacobian, stopping rules) but
runs without interpreter overhead. It only reports success or "fall back";
every failure is re-run by the reference implementation, which raises the
proper exception.
"""

import numpy as np
from numba import njit

from .autodiff._kernel import propagate

OK, FALLBACK = 0, 1


@njit(cache=True, nogil=True)
def _ld(t, x, pos, K):
    vals, G, H, T, err, bad = propagate(t[0], t[1], t[2], t[3], t[4], t[5], t[6][0], x, pos,
                                        K, 2, t[7], t[8][0])
    return G[0], H[0], err


@njit(cache=True, nogil=True)
def _force(t, x, pos, K, n):
    vals, G, H, T, err, bad = propagate(t[0], t[1], t[2], t[3], t[4], t[5], t[6][0], x, pos,
                                        K, 1, t[7], t[8][0])
    out = t[9]
    row = t[10]
    f = np.empty(n)
    J = np.empty((n, K))
    for i in range(n):
        f[i] = vals[out[i]]
        J[i] = G[row[i]]
    return f, J, err


@njit(cache=True, nogil=True)
def _eval(ld, fm, fm_const, qk, y, pk, xl, xf, ld_pos, f_pos, Kf, n, fm_zero):
    for i in range(n):
        xl[2 * i] = qk[i]
        xl[2 * i + 1] = y[i]
        xf[2 * i] = qk[i]
        xf[2 * i + 1] = y[i]
    g, H, err = _ld(ld, xl, ld_pos, 2 * n)
    r = np.empty(n)
    M = np.empty((n, n))
    D2L = np.empty(n)
    if err:
        return r, M, D2L, err
    if fm_zero:
        f = fm_const
        J = np.zeros((n, Kf))
    else:
        f, J, err = _force(fm, xf, f_pos, Kf, n)
        if err:
            return r, M, D2L, err
    for i in range(n):
        r[i] = pk[i] + g[2 * i] + f[i]
        D2L[i] = g[2 * i + 1]
        for j in range(n):
            M[i, j] = H[2 * i, 2 * j + 1] + (0.0 if fm_zero else J[i, 2 * j + 1])
    return r, M, D2L, 0


@njit(cache=True, nogil=True)
def newton_unconstrained(ld, fm, fm_const, fm_zero, fp_const, ld_pos, f_pos, Kf, xl, xf, n,
                         qk, pk, y0, tol, max_iters, min_iters, fault_condition):
    """Returns ``(status, y, iters, history, n_history, M, p_next, residual)``."""
    eps = np.finfo(np.float64).eps
    y = y0.copy()
    hist = np.empty(max_iters + 2)
    nh = 0
    for it in range(max_iters + 1):
        r, M, D2L, err = _eval(ld, fm, fm_const, qk, y, pk, xl, xf, ld_pos, f_pos, Kf, n,
                               fm_zero)
        if err:
            return FALLBACK, y, it, hist, nh, M, D2L, 0.0
        res = np.max(np.abs(r))
        hist[nh] = res
        nh += 1
        if not np.isfinite(res):
            return FALLBACK, y, it, hist, nh, M, D2L, res
        if res <= tol and it >= min_iters:
            return OK, y, it, hist, nh, M, D2L + fp_const, res
        if it == max_iters:
            break
        # singular or hopelessly conditioned: let the reference loop report it
        if not np.all(np.isfinite(M)):
            return FALLBACK, y, it, hist, nh, M, D2L, res
        Q, R = np.linalg.qr(M)
        d = np.abs(np.diag(R))
        if d.min() == 0.0 or d.max() / d.min() > fault_condition / 10.0:
            return FALLBACK, y, it, hist, nh, M, D2L, res
        dy = np.linalg.solve(M, r)
        y = y - dy
        if np.max(np.abs(dy)) <= 4 * eps * (1.0 + np.max(np.abs(y))) and res <= 1e3 * tol:
            r, M, D2L, err = _eval(ld, fm, fm_const, qk, y, pk, xl, xf, ld_pos, f_pos, Kf,
                                   n, fm_zero)
            if err:
                return FALLBACK, y, it, hist, nh, M, D2L, 0.0
            res = np.max(np.abs(r))
            hist[nh] = res
            nh += 1
            return OK, y, it + 1, hist, nh, M, D2L + fp_const, res
    return FALLBACK, y, max_iters, hist, nh, M, D2L, 0.0


def tape_args(graph):
    """The tape arrays of ``graph`` in the tuple layout used by the kernels."""
    t = graph.tape
    return (t.op, t.arg0, t.arg1, t.cval, t.vidx, t.slot, np.array([t.n_slots]),
            t.out_first, np.array([t.out_unique.shape[0]]), t.out_nodes, t.out_row)


@njit(cache=True, nogil=True)
def run_many(t, X, pos, K, order):
    """Values and gradients of every output at each row of ``X`` (order 0 or 1)."""
    P = X.shape[0]
    n_out = t[9].shape[0]
    vals_out = np.empty((P, n_out))
    G_out = np.zeros((P, n_out, K if order >= 1 else 0))
    for p in range(P):
        vals, G, H, T, err, bad = propagate(t[0], t[1], t[2], t[3], t[4], t[5], t[6][0],
                                            X[p], pos, K, order, t[7], t[8][0])
        if err:
            return vals_out, G_out, p
        for i in range(n_out):
            vals_out[p, i] = vals[t[9][i]]
            if order >= 1:
                G_out[p, i] = G[t[10][i]]
    return vals_out, G_out, -1
