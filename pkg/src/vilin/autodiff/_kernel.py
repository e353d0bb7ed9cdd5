"""Forward propagation of truncated multivariate Taylor coefficients.

Every tape node carries its value, gradient, Hessian and third-derivative
tensor over the ``K`` active variables. Storage is register-allocated by the
tape, and each slot tracks the index range ``[lo, hi)`` outside of which its
derivatives are zero; all loops are restricted to that range. Only the
upper triangle of the Hessian (``i <= j``) and the sorted entries of the
third tensor (``i <= j <= k``) are propagated; outputs are symmetrised by
copying from the sorted entry, so they are exactly symmetric.

Error codes: 0 ok, 1 division by zero, 2 sqrt of a negative number,
3 derivative of sqrt at zero, 4 zero raised to a negative power,
5 non-finite value.
"""

import math

import numpy as np
from numba import njit

OK, ERR_DIV0, ERR_SQRT_NEG, ERR_SQRT_ZERO, ERR_POW0, ERR_NONFINITE = 0, 1, 2, 3, 4, 5


@njit(cache=True, nogil=True)
def _unary_coeffs(op, x, k, order):
    """Value and first three derivatives of a unary primitive at ``x``.

    This is the single per-node rule: adding a primitive means adding a
    branch here and an opcode in ``graph.py``.
    """
    if op == 4:  # neg
        return -x, -1.0, 0.0, 0.0, OK
    if op == 5:  # recip
        if x == 0.0:
            return 0.0, 0.0, 0.0, 0.0, ERR_DIV0
        r = 1.0 / x
        return r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r, OK
    if op == 6:  # integer power
        n = int(k)
        if n == 0:
            return 1.0, 0.0, 0.0, 0.0, OK
        if x == 0.0 and n < 0:
            return 0.0, 0.0, 0.0, 0.0, ERR_POW0
        f0 = x ** n
        f1 = n * x ** (n - 1) if n != 1 else 1.0
        if n == 1:
            f2 = 0.0
        elif n == 2:
            f2 = 2.0
        else:
            f2 = n * (n - 1) * x ** (n - 2)
        if n == 1 or n == 2:
            f3 = 0.0
        elif n == 3:
            f3 = 6.0
        else:
            f3 = n * (n - 1) * (n - 2) * x ** (n - 3)
        return f0, f1, f2, f3, OK
    if op == 7:  # sin
        s = math.sin(x)
        c = math.cos(x)
        return s, c, -s, -c, OK
    if op == 8:  # cos
        s = math.sin(x)
        c = math.cos(x)
        return c, -s, -c, s, OK
    if op == 9:  # sqrt
        if x < 0.0:
            return 0.0, 0.0, 0.0, 0.0, ERR_SQRT_NEG
        r = math.sqrt(x)
        if order == 0:
            return r, 0.0, 0.0, 0.0, OK
        if r == 0.0:
            return 0.0, 0.0, 0.0, 0.0, ERR_SQRT_ZERO
        f1 = 0.5 / r
        f2 = -0.25 / (r * x)
        f3 = 0.375 / (r * x * x)
        return r, f1, f2, f3, OK
    return 0.0, 0.0, 0.0, 0.0, OK


@njit(cache=True, nogil=True)
def propagate(op, arg0, arg1, cval, vidx, slot, n_slots, x, pos, K, order, out_first,
              n_out):
    """Run the tape. Returns ``(values, G, H, T, err, err_node)``.

    ``G``, ``H`` and ``T`` hold the derivatives of the (unique) outputs;
    ``out_first[t]`` is the output row of tape node ``t`` or -1.
    """
    N = op.shape[0]
    vals = np.empty(N)
    ks = K if order >= 1 else 0
    kh = K if order >= 2 else 0
    kt = K if order >= 3 else 0
    G = np.zeros((n_slots, ks))
    H = np.zeros((n_slots, kh, kh))
    T = np.zeros((n_slots, kt, kt, kt))
    OG = np.zeros((n_out, ks))
    OH = np.zeros((n_out, kh, kh))
    OT = np.zeros((n_out, kt, kt, kt))
    slo = np.zeros(n_slots, dtype=np.int64)
    shi = np.zeros(n_slots, dtype=np.int64)

    for t in range(N):
        o = op[t]
        s = slot[t]
        if order >= 1:
            lo0 = slo[s]
            hi0 = shi[s]
            if hi0 > lo0:
                G[s, lo0:hi0] = 0.0
                if order >= 2:
                    H[s, lo0:hi0, lo0:hi0] = 0.0
                if order >= 3:
                    T[s, lo0:hi0, lo0:hi0, lo0:hi0] = 0.0
        lo = 0
        hi = 0

        if o == 0:
            vals[t] = cval[t]
        elif o == 1:
            vals[t] = x[vidx[t]]
            p = pos[vidx[t]]
            if order >= 1 and p >= 0:
                lo = p
                hi = p + 1
                G[s, p] = 1.0
        elif o == 2 or o == 3:
            a = arg0[t]
            b = arg1[t]
            sa = slot[a]
            sb = slot[b]
            va = vals[a]
            vb = vals[b]
            if o == 2:
                vals[t] = va + vb
            else:
                vals[t] = va * vb
            if order >= 1:
                la, ha, lb, hb = slo[sa], shi[sa], slo[sb], shi[sb]
                ea = ha <= la
                eb = hb <= lb
                if ea and eb:
                    lo = 0
                    hi = 0
                elif ea:
                    lo, hi = lb, hb
                elif eb:
                    lo, hi = la, ha
                else:
                    lo = min(la, lb)
                    hi = max(ha, hb)
                if o == 2:
                    for i in range(lo, hi):
                        G[s, i] = G[sa, i] + G[sb, i]
                    if order >= 2:
                        for i in range(lo, hi):
                            for j in range(i, hi):
                                H[s, i, j] = H[sa, i, j] + H[sb, i, j]
                    if order >= 3:
                        for i in range(lo, hi):
                            for j in range(i, hi):
                                for k in range(j, hi):
                                    T[s, i, j, k] = T[sa, i, j, k] + T[sb, i, j, k]
                elif ea or eb:
                    # product with a factor that is constant w.r.t. the
                    # active variables: plain scaling
                    if ea:
                        c = va
                        sc = sb
                    else:
                        c = vb
                        sc = sa
                    for i in range(lo, hi):
                        G[s, i] = c * G[sc, i]
                    if order >= 2:
                        for i in range(lo, hi):
                            for j in range(i, hi):
                                H[s, i, j] = c * H[sc, i, j]
                    if order >= 3:
                        for i in range(lo, hi):
                            for j in range(i, hi):
                                for k in range(j, hi):
                                    T[s, i, j, k] = c * T[sc, i, j, k]
                else:
                    for i in range(lo, hi):
                        G[s, i] = va * G[sb, i] + vb * G[sa, i]
                    if order >= 2:
                        for i in range(lo, hi):
                            gai = G[sa, i]
                            gbi = G[sb, i]
                            for j in range(i, hi):
                                H[s, i, j] = (va * H[sb, i, j] + vb * H[sa, i, j]
                                              + gai * G[sb, j] + gbi * G[sa, j])
                    if order >= 3:
                        for i in range(lo, hi):
                            for j in range(i, hi):
                                for k in range(j, hi):
                                    T[s, i, j, k] = (
                                        va * T[sb, i, j, k] + vb * T[sa, i, j, k]
                                        + H[sa, i, j] * G[sb, k] + H[sa, i, k] * G[sb, j]
                                        + H[sa, j, k] * G[sb, i]
                                        + H[sb, i, j] * G[sa, k] + H[sb, i, k] * G[sa, j]
                                        + H[sb, j, k] * G[sa, i])
        else:
            a = arg0[t]
            sa = slot[a]
            f0, f1, f2, f3, err = _unary_coeffs(o, vals[a], cval[t], order)
            if err != OK:
                if not (err == ERR_SQRT_ZERO and shi[sa] <= slo[sa]):
                    return vals, OG, OH, OT, err, t
                f1 = 0.0
                f2 = 0.0
                f3 = 0.0
            vals[t] = f0
            if order >= 1:
                lo = slo[sa]
                hi = shi[sa]
                for i in range(lo, hi):
                    G[s, i] = f1 * G[sa, i]
                if order >= 2:
                    for i in range(lo, hi):
                        gi = f2 * G[sa, i]
                        for j in range(i, hi):
                            H[s, i, j] = f1 * H[sa, i, j] + gi * G[sa, j]
                if order >= 3:
                    for i in range(lo, hi):
                        gi = G[sa, i]
                        for j in range(i, hi):
                            gj = G[sa, j]
                            hij = H[sa, i, j]
                            for k in range(j, hi):
                                gk = G[sa, k]
                                T[s, i, j, k] = (
                                    f1 * T[sa, i, j, k]
                                    + f2 * (hij * gk + H[sa, i, k] * gj + H[sa, j, k] * gi)
                                    + f3 * gi * gj * gk)

        if not math.isfinite(vals[t]):
            return vals, OG, OH, OT, ERR_NONFINITE, t
        if order >= 1:
            slo[s] = lo
            shi[s] = hi
        r = out_first[t]
        if r >= 0 and order >= 1:
            for i in range(lo, hi):
                OG[r, i] = G[s, i]
            if order >= 2:
                for i in range(lo, hi):
                    for j in range(i, hi):
                        v = H[s, i, j]
                        OH[r, i, j] = v
                        OH[r, j, i] = v
            if order >= 3:
                for i in range(lo, hi):
                    for j in range(i, hi):
                        for k in range(j, hi):
                            v = T[s, i, j, k]
                            OT[r, i, j, k] = v
                            OT[r, i, k, j] = v
                            OT[r, j, i, k] = v
                            OT[r, j, k, i] = v
                            OT[r, k, i, j] = v
                            OT[r, k, j, i] = v
    return vals, OG, OH, OT, OK, -1
