"""Exact first- and second-order linearizations of the one-step map.

The one-step map takes ``z = (q_k, p_k, u_k)`` to ``(q_{k+1}, p_{k+1})``.
Write ``w = (q_k, q_{k+1}, u_k)``, ``G(w) = D1 L_d + F_d^-`` and
``P(w) = D2 L_d + F_d^+``, so the step solves ``p_k + G(w) = 0`` and sets
``p_{k+1} = P(w)``. Implicit differentiation gives

    Y  = dq_{k+1}/dz = -M^{-1} [G_q, I, G_u]
    dp_{k+1}/dz      = P_y Y + [P_q, 0, P_u]

and, with ``W = dw/dz`` (identity rows for ``q_k`` and ``u_k``, ``Y`` for
``q_{k+1}``), the second derivatives

    Y2[i] = -(M^{-1} C)[i],  C[j] = W^T G_ww[j] W
    P2[i] = W^T P_ww[i] W + sum_j P_y[i, j] Y2[j]

The q-blocks are always formed first and the p-blocks are built from the
stored q-blocks. ``M`` is factored once per step and reused for every
right-hand side. Constrained systems add the multiplier ``lambda_k`` as an
unknown and the Schur complement ``S = Dh(q_{k+1}) M^{-1} Dh(q_k)^T``.
"""

from dataclasses import dataclass

import numpy as np

from ._linalg import COND_THRESHOLD, Factor
from .exceptions import SingularityError, StepError
from .integrator import DiscreteState, step
from .model import slots

PAIRS = ("qq", "qp", "pp", "qu", "pu", "uu")


@dataclass(frozen=True)
class FirstLinearization:
    """``A`` and ``B`` of the one-step map at one step, with their blocks."""

    dq_dq: np.ndarray
    dq_dp: np.ndarray
    dq_du: np.ndarray
    dp_dq: np.ndarray
    dp_dp: np.ndarray
    dp_du: np.ndarray
    m_matrix: np.ndarray
    m_condition: float

    @property
    def A(self):
        return np.block([[self.dq_dq, self.dq_dp], [self.dp_dq, self.dp_dp]])

    @property
    def B(self):
        return np.vstack([self.dq_du, self.dp_du])

    @property
    def n(self):
        return self.dq_dq.shape[0]

    @property
    def m(self):
        return self.dq_du.shape[1]


@dataclass(frozen=True)
class SecondLinearization:
    """Second derivatives of ``q_{k+1}`` and ``p_{k+1}`` with respect to ``(q_k, p_k, u_k)``.

    ``q`` and ``p`` are the full per-output Hessians, shape
    ``(n, 2n+m, 2n+m)``. The twelve named tensors are views of their
    blocks, e.g. ``q_qp[i, a, b] = d^2 q_{k+1}[i] / dq_k[a] dp_k[b]``.
    """

    q: np.ndarray
    p: np.ndarray
    n: int
    m: int

    def _block(self, which, pair):
        n, m = self.n, self.m
        s = {"q": slice(0, n), "p": slice(n, 2 * n), "u": slice(2 * n, 2 * n + m)}
        return getattr(self, which)[:, s[pair[0]], s[pair[1]]]

    def tensor(self, which, pair):
        """Block ``pair`` (one of ``PAIRS``) of output ``which`` ("q" or "p")."""
        if which not in ("q", "p") or pair not in PAIRS:
            raise KeyError(f"unknown tensor {which}_{pair}")
        return self._block(which, pair)

    def tensors(self):
        """All twelve tensors keyed ``"q_qq"``, ``"q_qp"``, ..., ``"p_uu"``."""
        return {f"{w}_{pr}": self._block(w, pr) for w in ("q", "p") for pr in PAIRS}

    def __getattr__(self, name):
        if len(name) == 4 and name[1] == "_" and name[0] in "qp" and name[2:] in PAIRS:
            return self._block(name[0], name[2:])
        raise AttributeError(name)


@dataclass(frozen=True)
class ConstraintSensitivities:
    """First derivatives of ``lambda_k`` (and the second derivatives once computed)."""

    dlam_dq: np.ndarray
    dlam_dp: np.ndarray
    dlam_du: np.ndarray
    s_matrix: np.ndarray
    s_condition: float
    second: np.ndarray = None

    @property
    def jacobian(self):
        return np.hstack([self.dlam_dq, self.dlam_dp, self.dlam_du])


@dataclass
class _StepContext:
    """Shared per-step quantities reused between first and second order."""

    s: object
    mfac: Factor
    Gw: np.ndarray
    Pw: np.ndarray
    Y: np.ndarray = None
    lam: np.ndarray = None
    dh_k: np.ndarray = None
    d2h_k: np.ndarray = None
    d3h_k: np.ndarray = None
    dh_next: np.ndarray = None
    d2h_next: np.ndarray = None
    sfac: Factor = None
    Lam: np.ndarray = None


def _check_step(step_result, state_k):
    if step_result is None:
        return
    if step_result.q_prev is not None and not np.array_equal(step_result.q_prev, state_k.q):
        raise ValueError("step result does not start from state_k")


def _resolve_step(disc, state_k, u_k, step_result):
    if not isinstance(state_k, DiscreteState):
        state_k = DiscreteState.from_vector(state_k)
    u_k = np.asarray(u_k, dtype=float).reshape(-1)
    if step_result is None:
        step_result = step(disc, state_k, u_k)
    _check_step(step_result, state_k)
    return state_k, u_k, step_result


def _first_derivs(s, n, m):
    """Jacobians of ``G`` and ``P`` over ``w = (q_k, q_{k+1}, u_k)``."""
    nw = 2 * n + m
    Gw = np.zeros((n, nw))
    Pw = np.zeros((n, nw))
    Gw[:, : 2 * n] = s.ld_hess[:n]
    Pw[:, : 2 * n] = s.ld_hess[n:]
    return Gw + s.fminus_jac, Pw + s.fplus_jac


def _context(disc, state_k, u_k, step_result, order, constrained):
    n, m = disc.n, disc.m
    q_next = step_result.state.q
    s = slots(disc, state_k.q, q_next, u_k, order=order + 1, with_constraints=constrained)
    mfac = Factor(s.M)
    if mfac.singular or mfac.condition > COND_THRESHOLD:
        raise SingularityError(
            f"M is singular or ill-conditioned (det={mfac.det:.3e}, cond={mfac.condition:.3e})",
            kind="M", det=mfac.det, condition=mfac.condition)
    Gw, Pw = _first_derivs(s, n, m)
    ctx = _StepContext(s, mfac, Gw, Pw)
    if constrained:
        ctx.lam = np.asarray(step_result.lam, dtype=float)
        ctx.dh_k, ctx.d2h_k, ctx.d3h_k = s.dh_k, s.d2h_k, s.d3h_k
        ctx.dh_next, ctx.d2h_next = s.dh_next, s.d2h_next
    return ctx


def _p_blocks(ctx, Y, n, m):
    """``dp_{k+1}/dz`` from the stored q-blocks ``Y``."""
    Pw = ctx.Pw
    dp = Pw[:, n: 2 * n] @ Y
    dp[:, :n] += Pw[:, :n]
    dp[:, 2 * n:] += Pw[:, 2 * n:]
    return dp


def _assemble_first(ctx, Y, n, m):
    dp = _p_blocks(ctx, Y, n, m)
    qs, ps, us = slice(0, n), slice(n, 2 * n), slice(2 * n, 2 * n + m)
    return FirstLinearization(Y[:, qs], Y[:, ps], Y[:, us], dp[:, qs], dp[:, ps], dp[:, us],
                              ctx.s.M.copy(), ctx.mfac.condition)


def _first_rhs(ctx, n, m, Gq):
    C = np.zeros((n, 2 * n + m))
    C[:, :n] = Gq
    C[:, n: 2 * n] = np.eye(n)
    C[:, 2 * n:] = ctx.Gw[:, 2 * n:]
    return C


def linearize(disc, state_k, u_k, step_result=None, _ctx=None):
    """First-order linearization of an unconstrained step.

    ``step_result`` is the accepted step from ``state_k``; it is computed
    when omitted.
    """
    if disc.c:
        raise ValueError("system has constraints; use linearize_constrained")
    state_k, u_k, step_result = _resolve_step(disc, state_k, u_k, step_result)
    n, m = disc.n, disc.m
    ctx = _ctx or _context(disc, state_k, u_k, step_result, 1, False)
    C = _first_rhs(ctx, n, m, ctx.Gw[:, :n])
    Y = -ctx.mfac.solve(C)
    # dq/dp is exactly -M^{-1}: reuse the same factorization
    ctx.Y = Y
    return _assemble_first(ctx, Y, n, m)


def _W(Y, n, m):
    nz = 2 * n + m
    W = np.zeros((nz, nz))
    W[:n, :n] = np.eye(n)
    W[n: 2 * n] = Y
    W[2 * n:, 2 * n:] = np.eye(m)
    return W


def _hessians_w(s, n, m, which):
    """Second derivatives over ``w`` of ``G`` (which="G") or ``P`` (which="P")."""
    nw = 2 * n + m
    H = np.zeros((n, nw, nw))
    rows = slice(0, n) if which == "G" else slice(n, 2 * n)
    H[:, : 2 * n, : 2 * n] = s.ld_third[rows]
    H += s.fminus_hess if which == "G" else s.fplus_hess
    return H


def _contract(H, W):
    """``W^T H[i] W`` for every leading index ``i``."""
    return np.einsum("ca,icd,db->iab", W, H, W, optimize=True)


def _symmetrize(T):
    return 0.5 * (T + T.transpose(0, 2, 1))


def _second_p(ctx, W, Y2, n):
    Pww = _hessians_w(ctx.s, n, W.shape[0] - 2 * n, "P")
    P2 = _contract(Pww, W)
    P2 += np.einsum("ij,jab->iab", ctx.Pw[:, n: 2 * n], Y2)
    return P2


def linearize2(disc, state_k, u_k, step_result=None, first=None, _ctx=None):
    """Second-order linearization of an unconstrained step.

    Follows the order state, first derivative, second derivative: when
    ``first`` is not given it is computed here from the same factorization.
    """
    if disc.c:
        raise ValueError("system has constraints; use linearize2_constrained")
    state_k, u_k, step_result = _resolve_step(disc, state_k, u_k, step_result)
    n, m = disc.n, disc.m
    ctx = _ctx or _context(disc, state_k, u_k, step_result, 2, False)
    if first is None:
        first = linearize(disc, state_k, u_k, step_result, _ctx=ctx)
    W = _W(np.hstack([first.dq_dq, first.dq_dp, first.dq_du]), n, m)
    C = _contract(_hessians_w(ctx.s, n, m, "G"), W)
    nz = 2 * n + m
    Y2 = -ctx.mfac.solve(C.reshape(n, nz * nz)).reshape(n, nz, nz)
    P2 = _second_p(ctx, W, Y2, n)
    return SecondLinearization(_symmetrize(Y2), _symmetrize(P2), n, m)


def linearize_both(disc, state_k, u_k, step_result=None):
    """First and second linearizations sharing one slot evaluation."""
    state_k, u_k, step_result = _resolve_step(disc, state_k, u_k, step_result)
    if disc.c:
        first, sens, ctx = _linearize_constrained(disc, state_k, u_k, step_result, 2)
        second, sens = _linearize2_constrained(disc, ctx, first, sens)
        return first, second, sens
    ctx = _context(disc, state_k, u_k, step_result, 2, False)
    first = linearize(disc, state_k, u_k, step_result, _ctx=ctx)
    return first, linearize2(disc, state_k, u_k, step_result, first, _ctx=ctx), None


# constrained systems

def _constrained_context(disc, state_k, u_k, step_result, order):
    if not disc.c:
        raise ValueError("system has no constraints; use linearize")
    ctx = _context(disc, state_k, u_k, step_result, order, True)
    mfac = ctx.mfac
    S = ctx.dh_next @ mfac.solve(ctx.dh_k.T)
    sfac = Factor(S)
    if sfac.singular or sfac.condition > COND_THRESHOLD:
        raise SingularityError(
            f"S = Dh(q_next) M^-1 Dh(q_k)^T is singular or ill-conditioned "
            f"(det={sfac.det:.3e}, cond={sfac.condition:.3e})",
            kind="S", det=sfac.det, condition=sfac.condition)
    ctx.sfac = sfac
    return ctx, S


def _linearize_constrained(disc, state_k, u_k, step_result, order):
    n, m = disc.n, disc.m
    ctx, S = _constrained_context(disc, state_k, u_k, step_result, order)
    # G_q picks up the curvature of the constraint force Dh(q_k)^T lambda
    Gq = ctx.Gw[:, :n] - np.einsum("c,cij->ij", ctx.lam, ctx.d2h_k)
    C = _first_rhs(ctx, n, m, Gq)
    MinvC = ctx.mfac.solve(C)
    Lam = ctx.sfac.solve(ctx.dh_next @ MinvC)
    Y = -(MinvC - ctx.mfac.solve(ctx.dh_k.T @ Lam))
    ctx.Y, ctx.Lam = Y, Lam
    first = _assemble_first(ctx, Y, n, m)
    sens = ConstraintSensitivities(Lam[:, :n], Lam[:, n: 2 * n], Lam[:, 2 * n:], S,
                                   ctx.sfac.condition)
    return first, sens, ctx


def linearize_constrained(disc, state_k, u_k, step_result=None):
    """First-order linearization of a constrained step.

    Returns ``(FirstLinearization, ConstraintSensitivities)``.
    """
    state_k, u_k, step_result = _resolve_step(disc, state_k, u_k, step_result)
    first, sens, _ = _linearize_constrained(disc, state_k, u_k, step_result, 1)
    return first, sens


def _linearize2_constrained(disc, ctx, first, sens):
    n, m, c = disc.n, disc.m, disc.c
    nz = 2 * n + m
    Y = np.hstack([first.dq_dq, first.dq_dp, first.dq_du])
    Lam = sens.jacobian
    W = _W(Y, n, m)
    Gww = _hessians_w(ctx.s, n, m, "G")
    # -sum_c lambda_c D^3 h_c(q_k) enters the (q_k, q_k) block
    Gww[:, :n, :n] -= np.einsum("c,cijk->ijk", ctx.lam, ctx.d3h_k)
    C2 = _contract(Gww, W)
    # cross terms between q_k and lambda_k: -D^2 h_c[i, j] (E_q[j, a] Lam[c, b] + sym)
    cross = -np.einsum("cij,cb->ijb", ctx.d2h_k, Lam)
    C2[:, :n, :] += cross
    C2[:, :, :n] += cross.transpose(0, 2, 1)
    MinvC2 = ctx.mfac.solve(C2.reshape(n, nz * nz)).reshape(n, nz, nz)
    curv = np.einsum("cjk,ja,kb->cab", ctx.d2h_next, Y, Y, optimize=True)
    rhs = np.einsum("cj,jab->cab", ctx.dh_next, MinvC2) - curv
    Lam2 = ctx.sfac.solve(rhs.reshape(c, nz * nz)).reshape(c, nz, nz)
    corr = ctx.mfac.solve(np.einsum("ci,cab->iab", ctx.dh_k, Lam2).reshape(n, nz * nz))
    Y2 = -(MinvC2 - corr.reshape(n, nz, nz))
    P2 = _second_p(ctx, W, Y2, n)
    second = SecondLinearization(_symmetrize(Y2), _symmetrize(P2), n, m)
    sens = ConstraintSensitivities(sens.dlam_dq, sens.dlam_dp, sens.dlam_du, sens.s_matrix,
                                   sens.s_condition, _symmetrize(Lam2))
    return second, sens


def linearize2_constrained(disc, state_k, u_k, step_result=None, first=None, sens=None):
    """Second-order linearization of a constrained step.

    Returns ``(SecondLinearization, ConstraintSensitivities)``; the
    sensitivities carry the second derivatives of ``lambda_k`` in
    ``second`` with shape ``(c, 2n+m, 2n+m)``.
    """
    state_k, u_k, step_result = _resolve_step(disc, state_k, u_k, step_result)
    f, s, ctx = _linearize_constrained(disc, state_k, u_k, step_result, 2)
    if first is None or sens is None:
        first, sens = f, s
    return _linearize2_constrained(disc, ctx, first, sens)


# diagnostics

@dataclass(frozen=True)
class SingularityReport:
    """Determinant and condition diagnostics for ``M`` and ``S`` at one step."""

    m_det: float
    m_condition: float
    s_det: float = None
    s_condition: float = None
    flags: tuple = ()

    @property
    def singular(self):
        return bool(self.flags)

    def as_dict(self):
        return {"m_det": self.m_det, "m_condition": self.m_condition, "s_det": self.s_det,
                "s_condition": self.s_condition, "flags": list(self.flags)}


def check_singularity(disc, q_k, q_next, u_k=None):
    """Report determinants and condition estimates of ``M`` (and ``S``).

    Never raises on singular matrices; flags ``"M"``/``"S"`` are set when a
    condition estimate exceeds the threshold or a matrix is exactly
    singular. Evaluation faults are reported as flag ``"evaluation"``.
    """
    u_k = np.zeros(disc.m) if u_k is None else np.asarray(u_k, dtype=float).reshape(-1)
    try:
        s = slots(disc, q_k, q_next, u_k, order=2, with_constraints=bool(disc.c))
    except ArithmeticError:
        return SingularityReport(np.nan, np.inf, flags=("evaluation",))
    mfac = Factor(s.M)
    flags = ["M"] if mfac.flagged else []
    s_det = s_cond = None
    if disc.c:
        if mfac.singular:
            s_det, s_cond = np.nan, np.inf
            flags.append("S")
        else:
            sfac = Factor(s.dh_next @ mfac.solve(s.dh_k.T))
            s_det, s_cond = sfac.det, sfac.condition
            if sfac.flagged:
                flags.append("S")
    return SingularityReport(mfac.det, mfac.condition, s_det, s_cond, tuple(flags))


# finite-difference oracle

def one_step_map(disc, z, guess=None, min_iters=0):
    """``(q_{k+1}, p_{k+1})`` as a function of the stacked ``z = (q_k, p_k, u_k)``."""
    n = disc.n
    r = step(disc, DiscreteState(z[:n], z[n: 2 * n]), z[2 * n:], guess=guess,
             min_iters=min_iters)
    return np.concatenate([r.state.q, r.state.p])


def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / (1.0 + np.abs(analytic))))


def fd_jacobian(f, z, h):
    z = np.asarray(z, dtype=float)
    cols = []
    for a in range(z.size):
        e = np.zeros_like(z)
        e[a] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_hessian(f, z, h):
    """Second central differences ``d^2 f / dz_a dz_b`` (leading axis is the output)."""
    z = np.asarray(z, dtype=float)
    nz = z.size
    f0 = f(z)
    H = np.zeros(f0.shape + (nz, nz))
    for a in range(nz):
        ea = np.zeros(nz)
        ea[a] = h
        H[..., a, a] = (f(z + ea) - 2 * f0 + f(z - ea)) / h**2
        for b in range(a + 1, nz):
            eb = np.zeros(nz)
            eb[b] = h
            v = (f(z + ea + eb) - f(z + ea - eb) - f(z - ea + eb) + f(z - ea - eb)) / (4 * h * h)
            H[..., a, b] = H[..., b, a] = v
    return H


# central-difference step per derivative order
FD_STEPS = {1: 1e-5, 2: 1e-4}
# Newton corrections forced on every probe solve, per order: a warm-started
# solve stops just under the tolerance, and differences divide that error by h^order
FD_MIN_ITERS = {1: 2, 2: 3}


def richardson(fd, f, z, h):
    """Central differences at ``h`` and ``h / 2`` extrapolated to cancel the ``h^2`` term."""
    return (4.0 * fd(f, z, h / 2) - fd(f, z, h)) / 3.0


@dataclass(frozen=True)
class OracleReport:
    """Result of :func:`fd_oracle`: the maximum relative error and the failed probes."""

    error: float
    order: int
    failures: tuple = ()


def fd_oracle(disc, state_k, u_k, order=1, constrained=None):
    """Compare the analytic linearization with central differences of :func:`step`.

    The error is the componentwise ``|analytic - fd| / (1 + |analytic|)``,
    maximized over all entries. Central differences with steps 1e-5 (order 1)
    and 1e-4 (order 2) are Richardson-extrapolated with their half steps, and
    every probe starts Newton from the unperturbed solution.
    Probes whose neighbouring step fails are listed in ``failures`` and the
    error is reported as ``inf``.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    constrained = bool(disc.c) if constrained is None else constrained
    if constrained != bool(disc.c):
        raise ValueError("constrained flag does not match the system")
    if not isinstance(state_k, DiscreteState):
        state_k = DiscreteState.from_vector(state_k)
    u_k = np.asarray(u_k, dtype=float).reshape(-1)
    z = np.concatenate([state_k.q, state_k.p, u_k])
    n = disc.n
    res = step(disc, state_k, u_k)
    failures = []

    guess = (res.state.q, res.lam) if constrained else res.state.q

    def f(zz):
        try:
            return one_step_map(disc, zz, guess, FD_MIN_ITERS[order])
        except (StepError, SingularityError) as exc:
            failures.append(str(exc))
            return np.full(2 * n, np.nan)

    if order == 1:
        if constrained:
            first, _ = linearize_constrained(disc, state_k, u_k, res)
        else:
            first = linearize(disc, state_k, u_k, res)
        analytic = np.hstack([first.A, first.B])
        numeric = richardson(fd_jacobian, f, z, FD_STEPS[1])
    else:
        first, second, _ = linearize_both(disc, state_k, u_k, res)
        analytic = np.concatenate([second.q, second.p])
        numeric = richardson(fd_hessian, f, z, FD_STEPS[2])
    if failures:
        return OracleReport(np.inf, order, tuple(failures))
    return OracleReport(_rel_err(analytic, numeric), order)
