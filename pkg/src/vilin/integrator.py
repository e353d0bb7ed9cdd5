"""Midpoint variational integrator: one-step solves and trajectory simulation.

The state is ``(q_k, p_k)``. A step solves the forced DEL equation

    p_k + D1 L_d(q_k, q_{k+1}) + F_d^-(q_k, q_{k+1}, u_k) - Dh(q_k)^T lambda_k = 0
    h(q_{k+1}) = 0

for ``q_{k+1}`` (and ``lambda_k`` when constrained) by Newton's method, then
sets ``p_{k+1} = D2 L_d + F_d^+``.
"""

from dataclasses import dataclass, field

import numpy as np

from ._fastpath import OK as FAST_OK
from ._fastpath import newton_unconstrained
from ._linalg import Factor
from .exceptions import (ConstraintError, ConvergenceError, EvaluationError, SingularityError,
                         StepError)
from .model import slots

TOL = 1e-12
MAX_ITERS = 50
CONSTRAINT_TOL = 1e-10
# a Newton Jacobian this ill-conditioned is treated as singular
FAULT_CONDITION = 1.0 / np.finfo(float).eps


@dataclass(frozen=True)
class DiscreteState:
    """Configuration and discrete momentum at one time index."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        p = np.array(self.p, dtype=float).reshape(-1)
        if q.shape != p.shape:
            raise ValueError(f"q and p differ in size ({q.size} vs {p.size})")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("state entries must be finite")
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def x(self):
        """Stacked state vector ``[q, p]``."""
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size % 2:
            raise ValueError("state vector must have even length")
        n = x.size // 2
        return cls(x[:n], x[n:])


@dataclass(frozen=True)
class StepResult:
    """Accepted step from ``q_k`` to ``state.q``.

    ``residual`` is the infinity norm of the DEL residual (and constraint
    residual when constrained) at the returned solution; ``history`` keeps
    the residual norm of every Newton iterate.
    """

    state: DiscreteState
    lam: np.ndarray
    newton_iters: int
    residual: float
    q_prev: np.ndarray = None
    m_condition: float = None
    history: tuple = ()


def _check_inputs(disc, state, u):
    u = np.asarray(u, dtype=float).reshape(-1)
    if state.q.shape != (disc.n,):
        raise ValueError(f"state has size {state.q.size}, system has n={disc.n}")
    if u.shape != (disc.m,):
        raise ValueError(f"input has size {u.size}, system has m={disc.m}")
    return u


def _fault(msg, history, exc_type=ConvergenceError):
    return exc_type(msg, residuals=history)


def step(disc, state, u, tol=TOL, max_iters=MAX_ITERS, guess=None, min_iters=0):
    """Advance a system by one step.

    ``guess`` optionally starts Newton from a nearby solution: ``q_{k+1}``,
    or ``(q_{k+1}, lambda_k)`` for constrained systems. The default start
    is ``q_{k+1} = q_k``. ``min_iters`` forces that many Newton corrections
    before the tolerance test, which drives the residual to the roundoff floor.
    """
    if disc.c:
        return step_constrained(disc, state, u, tol=tol, max_iters=max_iters, guess=guess,
                                min_iters=min_iters)
    u = _check_inputs(disc, state, u)
    qk, pk = state.q, state.p
    if disc._fast is not None:
        res = _step_fast(disc, qk, pk, u, tol, max_iters, _start(qk, guess), min_iters)
        if res is not None:
            return res
    y = _start(qk, guess)
    history = []
    for it in range(max_iters + 1):
        s = slots(disc, qk, y, u, order=2)
        r = pk + s.D1L + s.fminus
        res = float(np.max(np.abs(r)))
        history.append(res)
        if not np.isfinite(res):
            raise _fault("non-finite DEL residual", history)
        fac = Factor(s.M)
        if res <= tol and it >= min_iters:
            return _accept(s, fac, y, np.zeros(0), it, res, qk, history)
        if it == max_iters:
            break
        if fac.singular or fac.condition > FAULT_CONDITION:
            raise SingularityError("singular Newton Jacobian M", kind="M", det=fac.det,
                                   condition=fac.condition)
        dy = fac.solve(r)
        y = y - dy
        # roundoff floor: the update no longer changes the iterate
        if np.max(np.abs(dy)) <= 4 * np.finfo(float).eps * (1.0 + np.max(np.abs(y))) and res <= 1e3 * tol:
            s = slots(disc, qk, y, u, order=2)
            res = float(np.max(np.abs(pk + s.D1L + s.fminus)))
            history.append(res)
            return _accept(s, Factor(s.M), y, np.zeros(0), it + 1, res, qk, history)
    raise _fault(f"Newton did not converge in {max_iters} iterations "
                 f"(residual {history[-1]:.3e})", history)


def _start(qk, guess):
    if guess is None:
        return qk.copy()
    y = np.array(guess[0] if isinstance(guess, tuple) else guess, dtype=float)
    if y.shape != qk.shape:
        raise ValueError(f"guess has size {y.size}, expected {qk.size}")
    return y


def _step_fast(disc, qk, pk, u, tol, max_iters, y0, min_iters):
    """Compiled Newton loop; ``None`` hands the step back to the reference loop."""
    ld, fm, fm_const, fm_zero, fp_const = disc._fast
    xl = np.concatenate([np.empty(2 * disc.n), disc._params])
    xf = np.concatenate([np.empty(2 * disc.n), u, disc._params])
    status, y, iters, hist, nh, M, p_next, res = newton_unconstrained(
        ld, fm, fm_const, fm_zero, fp_const, disc._ld_pos, disc._f_pos, 2 * disc.n + disc.m,
        xl, xf, disc.n, qk, pk, y0, tol, max_iters, min_iters, FAULT_CONDITION)
    if status != FAST_OK:
        return None
    fac = Factor(M)
    if fac.singular or fac.condition > FAULT_CONDITION:
        return None
    return StepResult(DiscreteState(y, p_next), np.zeros(0), iters, float(res), np.array(qk),
                      fac.condition, tuple(hist[:nh].tolist()))


def _accept(s, fac, y, lam, iters, res, qk, history):
    if fac.singular or fac.condition > FAULT_CONDITION:
        raise SingularityError("M is singular at the step solution", kind="M", det=fac.det,
                               condition=fac.condition)
    p_next = s.D2L + s.fplus
    return StepResult(DiscreteState(y, p_next), lam, iters, res, np.array(qk),
                      fac.condition, tuple(history))


def step_constrained(disc, state, u, tol=TOL, max_iters=MAX_ITERS,
                     constraint_tol=CONSTRAINT_TOL, guess=None, min_iters=0):
    """Advance a holonomically constrained system by one step.

    Solves for ``(q_{k+1}, lambda_k)`` together using the bordered Jacobian
    ``[[M, -Dh(q_k)^T], [Dh(q_{k+1}), 0]]``.
    """
    if not disc.c:
        raise ValueError("step_constrained needs a system with constraints")
    u = _check_inputs(disc, state, u)
    n, c = disc.n, disc.c
    qk, pk = state.q, state.p
    _, dh_k, _, _ = disc.constraint_derivatives(qk, 1)
    y = _start(qk, guess)
    lam = np.zeros(c)
    if isinstance(guess, tuple):
        lam = np.array(guess[1], dtype=float).reshape(c)
    history = []
    J = np.zeros((n + c, n + c))
    J[:n, n:] = -dh_k.T
    for it in range(max_iters + 1):
        s = slots(disc, qk, y, u, order=2)
        h, dh, _, _ = disc.constraint_derivatives(y, 1)
        r = np.concatenate([pk + s.D1L + s.fminus - dh_k.T @ lam, h])
        res = float(np.max(np.abs(r)))
        history.append(res)
        if not np.isfinite(res):
            raise _fault("non-finite constrained DEL residual", history)
        if res <= tol and it >= min_iters:
            return _accept(s, Factor(s.M), y, lam, it, res, qk, history)
        if it == max_iters:
            break
        J[:n, :n] = s.M
        J[n:, :n] = dh
        fac = Factor(J)
        if fac.singular or fac.condition > FAULT_CONDITION:
            mfac = Factor(s.M)
            kind = "M" if mfac.flagged else "S"
            raise SingularityError(f"singular bordered Newton Jacobian ({kind})", kind=kind,
                                   det=fac.det, condition=fac.condition)
        d = fac.solve(r)
        y = y - d[:n]
        lam = lam - d[n:]
        scale = 1.0 + max(np.max(np.abs(y)), np.max(np.abs(lam)))
        if np.max(np.abs(d)) <= 4 * np.finfo(float).eps * scale and res <= 1e3 * tol:
            s = slots(disc, qk, y, u, order=2)
            h = disc.constraint_derivatives(y, 1)[0]
            r = np.concatenate([pk + s.D1L + s.fminus - dh_k.T @ lam, h])
            res = float(np.max(np.abs(r)))
            history.append(res)
            return _accept(s, Factor(s.M), y, lam, it + 1, res, qk, history)
    h = disc.constraint_derivatives(y, 1)[0]
    if np.max(np.abs(h)) > constraint_tol and np.max(np.abs(r[:n])) <= tol:
        raise _fault(f"constraint residual {np.max(np.abs(h)):.3e} above tolerance",
                     history, ConstraintError)
    raise _fault(f"constrained Newton did not converge in {max_iters} iterations "
                 f"(residual {history[-1]:.3e})", history)


@dataclass
class Trajectory:
    """Simulated (or reference) trajectory.

    ``states`` has ``N + 1`` entries, ``inputs`` ``N`` rows. ``lambdas`` holds
    the constraint forces per step (``N x c``) and ``energies`` the energy
    proxy per interval. ``steps`` keeps the accepted :class:`StepResult`
    objects when the trajectory came from :func:`simulate`.
    """

    dt: float
    states: list
    inputs: np.ndarray
    lambdas: np.ndarray = None
    energies: np.ndarray = None
    steps: list = field(default=None, repr=False)

    def __post_init__(self):
        self.states = list(self.states)
        N = len(self.states) - 1
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(N, -1)
        if self.lambdas is None:
            self.lambdas = np.zeros((N, 0))
        self.lambdas = np.asarray(self.lambdas, dtype=float).reshape(N, -1)
        if self.energies is not None:
            self.energies = np.asarray(self.energies, dtype=float)
        if self.steps is not None and len(self.steps) != N:
            raise ValueError("steps must have one entry per input")

    @property
    def N(self):
        return len(self.states) - 1

    @property
    def times(self):
        return self.dt * np.arange(self.N + 1)

    @property
    def q(self):
        return np.array([s.q for s in self.states])

    @property
    def p(self):
        return np.array([s.p for s in self.states])

    @property
    def x(self):
        return np.hstack([self.q, self.p])


def energy_proxy(disc, q_k, q_next):
    """Continuous energy at the midpoint with the finite-difference velocity."""
    q_k, q_next = np.asarray(q_k, float), np.asarray(q_next, float)
    return disc.system.energy(0.5 * (q_k + q_next), (q_next - q_k) / disc.dt)


def simulate(disc, x0, inputs, tol=TOL, max_iters=MAX_ITERS):
    """Simulate ``len(inputs)`` steps from ``x0``.

    A failing step is re-raised with its ``step_index`` set.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, disc.m) if disc.m else inputs.reshape(-1, 0)
    if inputs.ndim != 2 or inputs.shape[1] != disc.m:
        raise ValueError(f"inputs must have shape (N, {disc.m})")
    N = inputs.shape[0]
    if N < 1:
        raise ValueError("need at least one input step")
    if not isinstance(x0, DiscreteState):
        x0 = DiscreteState.from_vector(x0)
    states, steps = [x0], []
    lambdas = np.zeros((N, disc.c))
    state = x0
    for k in range(N):
        try:
            res = step(disc, state, inputs[k], tol=tol, max_iters=max_iters)
        except (StepError, SingularityError, EvaluationError) as exc:
            exc.step_index = k
            raise
        steps.append(res)
        lambdas[k] = res.lam
        state = res.state
        states.append(state)
    q = np.array([s.q for s in states])
    energies = disc.system.energies(0.5 * (q[:-1] + q[1:]), (q[1:] - q[:-1]) / disc.dt)
    return Trajectory(disc.dt, states, inputs, lambdas, energies, steps)


def project_configuration(disc, q, fixed=(), tol=CONSTRAINT_TOL, max_iters=MAX_ITERS):
    """Nearest-step projection of ``q`` onto ``h(q) = 0``.

    Gauss-Newton minimum-norm corrections move only the coordinates not
    listed in ``fixed`` (indices). Returns ``q`` unchanged for an
    unconstrained system.
    """
    q = np.array(q, dtype=float)
    if not disc.c:
        return q
    free = np.setdiff1d(np.arange(disc.n), np.asarray(fixed, dtype=int))
    for _ in range(max_iters):
        h, Dh, _, _ = disc.constraint_derivatives(q, 1)
        if np.max(np.abs(h)) <= tol:
            return q
        J = Dh[:, free]
        q[free] -= J.T @ np.linalg.solve(J @ J.T, h)
    raise ConstraintError(f"projection did not reach |h| <= {tol:g}", [float(np.max(np.abs(h)))])


def perturb_configuration(disc, q, dq):
    """``q + dq`` with ``dq`` projected onto the constraint tangent space, then onto ``h = 0``."""
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    if disc.c:
        _, Dh, _, _ = disc.constraint_derivatives(q, 1)
        dq = dq - Dh.T @ np.linalg.solve(Dh @ Dh.T, Dh @ dq)
    return project_configuration(disc, q + dq)
