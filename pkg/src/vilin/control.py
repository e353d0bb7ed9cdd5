"""Discrete time-varying LQR and trajectory optimization on the exact linearization."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import EvaluationError, SingularityError, StepError
from .integrator import DiscreteState, Trajectory, energy_proxy, simulate, step
from .linearizer import linearize, linearize_both, linearize_constrained


def _sym_psd(M, what, strict=False, tol=1e-10):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be square")
    if not np.allclose(M, M.T, rtol=0, atol=tol * max(1.0, np.abs(M).max())):
        raise ValueError(f"{what} must be symmetric")
    ev = np.linalg.eigvalsh(0.5 * (M + M.T)) if M.size else np.zeros(0)
    scale = max(1.0, np.abs(ev).max()) if ev.size else 1.0
    if strict and ev.size and ev.min() <= tol * scale:
        raise ValueError(f"{what} must be positive definite")
    if ev.size and ev.min() < -tol * scale:
        raise ValueError(f"{what} must be positive semidefinite")
    return M


def _per_step(M, count, what):
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return np.broadcast_to(M, (count,) + M.shape).copy()
    if M.ndim != 3 or M.shape[0] != count:
        raise ValueError(f"{what} needs {count} matrices, got shape {M.shape}")
    return M


@dataclass
class LqrProblem:
    """Finite-horizon LQR data for the perturbation dynamics ``z' = A z + B mu``.

    ``A`` and ``B`` hold one matrix per step ``k = 0..N-1``; ``Q`` has
    ``N + 1`` entries (the last is the terminal weight) and ``R`` ``N``.
    A single matrix is broadcast over the horizon. ``R`` must be positive
    definite so that ``R + B^T P B`` is always invertible.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    reference: Trajectory = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.ndim != 3 or self.B.ndim != 3 or self.A.shape[0] != self.B.shape[0]:
            raise ValueError("A and B must be sequences of matrices of equal length")
        N, nx, _ = self.A.shape
        if self.A.shape[2] != nx or self.B.shape[1] != nx:
            raise ValueError("inconsistent A/B dimensions")
        self.Q = _per_step(self.Q, N + 1, "Q")
        self.R = _per_step(self.R, N, "R")
        for k, Qk in enumerate(self.Q):
            _sym_psd(Qk, f"Q({k})")
        for k, Rk in enumerate(self.R):
            _sym_psd(Rk, f"R({k})", strict=True)

    @property
    def N(self):
        return self.A.shape[0]


@dataclass
class LqrSolution:
    """Riccati matrices ``P(0..N)`` and gains ``K(0..N-1)`` (``m x 2n``)."""

    P: np.ndarray
    K: np.ndarray


def solve_lqr(problem):
    """Backward Riccati recursion from ``P(N) = Q(N)``.

    ``K(k) = (R + B^T P(k+1) B)^{-1} B^T P(k+1) A`` and
    ``P(k) = Q + A^T P(k+1) A - A^T P(k+1) B K(k)``.
    """
    A, B, Q, R = problem.A, problem.B, problem.Q, problem.R
    N, nx, m = B.shape
    P = np.empty((N + 1, nx, nx))
    K = np.empty((N, m, nx))
    P[N] = Q[N]
    for k in range(N - 1, -1, -1):
        Pn = P[k + 1]
        PB = Pn @ B[k]
        G = R[k] + B[k].T @ PB
        try:
            fac = cho_factor(G)
        except np.linalg.LinAlgError:
            raise SingularityError(f"R + B^T P B is not positive definite at k={k}",
                                   kind="R", step_index=k) from None
        K[k] = cho_solve(fac, PB.T @ A[k])
        Pk = Q[k] + A[k].T @ Pn @ A[k] - A[k].T @ PB @ K[k]
        P[k] = 0.5 * (Pk + Pk.T)
    return LqrSolution(P, K)


def default_weights(n, m, config_weight=100.0):
    """State weight ``config_weight`` on configurations and 1 on momenta; ``R = I``."""
    Q = np.diag(np.concatenate([np.full(n, config_weight), np.ones(n)]))
    return CostWeights(Q, np.eye(m), Q.copy())


@dataclass
class CostWeights:
    """Quadratic running weights ``Q`` (state), ``R`` (input) and terminal ``Qf``."""

    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray = None

    def __post_init__(self):
        self.Q = _sym_psd(self.Q, "Q")
        self.R = _sym_psd(self.R, "R", strict=True)
        self.Qf = self.Q.copy() if self.Qf is None else _sym_psd(self.Qf, "Qf")


def linearize_trajectory(disc, traj, threads=1):
    """``A(k)`` and ``B(k)`` along a simulated trajectory (results ordered by k)."""
    steps = traj.steps
    if steps is None:
        steps = [None] * traj.N

    def one(k):
        if disc.c:
            first, _ = linearize_constrained(disc, traj.states[k], traj.inputs[k], steps[k])
        else:
            first = linearize(disc, traj.states[k], traj.inputs[k], steps[k])
        return first.A, first.B

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, range(traj.N)))
    else:
        out = [one(k) for k in range(traj.N)]
    return np.array([a for a, _ in out]), np.array([b for _, b in out])


def lqr_problem(disc, reference, weights=None, threads=1):
    """LQR problem linearized along a feasible ``reference`` trajectory."""
    weights = weights or default_weights(disc.n, disc.m)
    A, B = linearize_trajectory(disc, reference, threads)
    N = reference.N
    Q = np.concatenate([np.broadcast_to(weights.Q, (N,) + weights.Q.shape), weights.Qf[None]])
    return LqrProblem(A, B, Q, weights.R, reference)


def rollout_closed_loop(disc, x0, reference, gains):
    """Simulate ``u(k) = u_d(k) - K(k) (x(k) - x_d(k))`` with the nonlinear step."""
    if not isinstance(x0, DiscreteState):
        x0 = DiscreteState.from_vector(x0)
    K = gains.K if isinstance(gains, LqrSolution) else np.asarray(gains)
    N = reference.N
    if K.shape[0] != N:
        raise ValueError(f"need {N} gains, got {K.shape[0]}")
    xd = reference.x
    states, steps, inputs = [x0], [], np.empty((N, disc.m))
    lambdas, energies = np.zeros((N, disc.c)), np.empty(N)
    state = x0
    for k in range(N):
        u = reference.inputs[k] - K[k] @ (state.x - xd[k])
        try:
            res = step(disc, state, u)
        except (StepError, SingularityError, EvaluationError) as exc:
            exc.step_index = k
            raise
        inputs[k] = u
        lambdas[k] = res.lam
        energies[k] = energy_proxy(disc, state.q, res.state.q)
        steps.append(res)
        state = res.state
        states.append(state)
    return Trajectory(disc.dt, states, inputs, lambdas, energies, steps)


# trajectory optimization

@dataclass
class OptimizationLog:
    """Per-iteration record ``{cost, descent_norm, step_size}``."""

    iterations: list = field(default_factory=list)
    converged: bool = False
    tolerance: float = None
    method: str = None

    @property
    def n_iter(self):
        """Number of accepted descent steps."""
        return sum(1 for it in self.iterations if it["step_size"] > 0)

    @property
    def costs(self):
        return np.array([it["cost"] for it in self.iterations])

    def as_dict(self):
        return {"method": self.method, "converged": self.converged, "tolerance": self.tolerance,
                "n_iter": self.n_iter, "iterations": self.iterations}


def _first(disc, state, u, res):
    if disc.c:
        return linearize_constrained(disc, state, u, res)[0]
    return linearize(disc, state, u, res)


class _Objective:
    """Quadratic tracking cost of a trajectory against the reference."""

    def __init__(self, disc, reference, weights):
        self.disc = disc
        self.x0 = reference.states[0]
        self.xd = reference.x
        self.ud = reference.inputs
        self.W = weights

    def cost_of(self, traj):
        e = traj.x - self.xd
        du = traj.inputs - self.ud
        Q, R, Qf = self.W.Q, self.W.R, self.W.Qf
        run = np.einsum("ki,ij,kj->", e[:-1], Q, e[:-1]) + np.einsum("ki,ij,kj->", du, R, du)
        return 0.5 * float(run + e[-1] @ Qf @ e[-1])

    def cost(self, U):
        try:
            return self.cost_of(simulate(self.disc, self.x0, U))
        except (StepError, SingularityError, EvaluationError):
            return np.inf

    def linearize(self, traj, second=False, threads=1):
        """``A(k)``, ``B(k)`` and, if ``second``, the stacked Hessians ``f_zz(k)``."""
        disc = self.disc

        def one(k):
            args = (disc, traj.states[k], traj.inputs[k], traj.steps[k])
            if second:
                first, sec, _ = linearize_both(*args)
                return first.A, first.B, np.concatenate([sec.q, sec.p])
            first = _first(*args)
            return first.A, first.B, None

        if threads and threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                out = list(pool.map(one, range(traj.N)))
        else:
            out = [one(k) for k in range(traj.N)]
        A = np.array([o[0] for o in out])
        B = np.array([o[1] for o in out])
        F2 = np.array([o[2] for o in out]) if second else None
        return A, B, F2

    def gradient(self, traj, A, B):
        """Adjoint sweep: gradient of the cost with respect to the inputs."""
        W = self.W
        e = traj.x - self.xd
        du = traj.inputs - self.ud
        N = traj.N
        lam = W.Qf @ e[N]
        g = np.empty_like(du)
        for k in range(N - 1, -1, -1):
            g[k] = W.R @ du[k] + B[k].T @ lam
            lam = W.Q @ e[k] + A[k].T @ lam
        return g


def _lq_direction(obj, traj, A, B, metric, F2=None):
    """Feedback form ``du = kff + K dx`` of the LQ descent subproblem.

    The subproblem has the linear terms of the tracking cost, the quadratic
    ``metric = (Q, R, Qf)`` and, with ``F2``, the second-order dynamics
    curvature weighted by the value gradient. Returns ``None`` when some
    ``Quu`` is not positive definite.
    """
    W = obj.W
    Qm, Rm, Qfm = metric
    e = traj.x - obj.xd
    du = traj.inputs - obj.ud
    N, nx, m = B.shape
    Vx = W.Qf @ e[N]
    Vxx = Qfm.copy()
    kff = np.empty((N, m))
    K = np.empty((N, m, nx))
    for k in range(N - 1, -1, -1):
        Ak, Bk = A[k], B[k]
        Qx = W.Q @ e[k] + Ak.T @ Vx
        Qu = W.R @ du[k] + Bk.T @ Vx
        Qxx = Qm + Ak.T @ Vxx @ Ak
        Quu = Rm + Bk.T @ Vxx @ Bk
        Qux = Bk.T @ Vxx @ Ak
        if F2 is not None:
            c = np.einsum("i,iab->ab", Vx, F2[k])
            Qxx = Qxx + c[:nx, :nx]
            Quu = Quu + c[nx:, nx:]
            Qux = Qux + c[nx:, :nx]
        try:
            fac = cho_factor(Quu)
        except np.linalg.LinAlgError:
            return None
        kff[k] = -cho_solve(fac, Qu)
        K[k] = -cho_solve(fac, Qux)
        Vx = Qx + K[k].T @ Quu @ kff[k] + K[k].T @ Qu + Qux.T @ kff[k]
        Vxx = Qxx + K[k].T @ Quu @ K[k] + K[k].T @ Qux + Qux.T @ K[k]
        Vxx = 0.5 * (Vxx + Vxx.T)
    return kff, K


def _propagate(A, B, kff, K):
    """Linear state and input variations generated by a feedback-form direction."""
    N, nx, m = B.shape
    dX = np.zeros((N + 1, nx))
    dU = np.empty((N, m))
    for k in range(N):
        dU[k] = kff[k] + K[k] @ dX[k]
        dX[k + 1] = A[k] @ dX[k] + B[k] @ dU[k]
    return dX, dU


def _project(disc, x0, X, U, dX, dU, Kp, alpha):
    """Feasible trajectory near ``(X + a dX, U + a dU)`` by LQR feedback."""
    states, steps = [x0], []
    N = U.shape[0]
    inputs = np.empty_like(U)
    lambdas = np.zeros((N, disc.c))
    energies = np.empty(N)
    state = x0
    for k in range(N):
        u = U[k] + alpha * dU[k] - Kp[k] @ (state.x - X[k] - alpha * dX[k])
        res = step(disc, state, u)
        inputs[k] = u
        lambdas[k] = res.lam
        energies[k] = energy_proxy(disc, state.q, res.state.q)
        steps.append(res)
        state = res.state
        states.append(state)
    return Trajectory(disc.dt, states, inputs, lambdas, energies, steps)


METHODS = ("first", "second")
# sufficient-decrease constant of the Armijo rule
armijo_constant = 1e-4


def optimize_trajectory(disc, reference, weights=None, method="second", tol=1e-6,
                        max_iters=1000, u0=None, armijo=armijo_constant, max_halvings=50, threads=1):
    """Find a DEL-feasible trajectory tracking ``reference``.

    The decision variables are the inputs; ``x_0`` is the reference's
    initial state. Each iteration linearizes along the current trajectory,
    computes the adjoint gradient of the tracking cost and a descent
    direction from an LQ subproblem over ``A(k), B(k)``:

    * ``method="first"`` uses only the first-order linearization with an
      identity metric (steepest descent in the trajectory variations);
    * ``method="second"`` uses the cost weights plus the second-order
      linearization tensors weighted by the value gradient (a Newton step),
      falling back to the Gauss-Newton model when that is not convex.

    Trial points are made feasible by simulating under the LQR feedback of
    the current linearization; step sizes follow Armijo backtracking
    (halving) on the slope ``g . du``. Iteration stops when the norm of the
    input direction is at most ``tol``. Returns ``(trajectory, log)``.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    weights = weights or default_weights(disc.n, disc.m)
    obj = _Objective(disc, reference, weights)
    N, nx = reference.N, 2 * disc.n
    U = np.array(reference.inputs if u0 is None else u0, dtype=float).reshape(N, disc.m)
    traj = simulate(disc, obj.x0, U)
    J = obj.cost_of(traj)
    log = OptimizationLog(tolerance=tol, method=method)
    gn = (weights.Q, weights.R, weights.Qf)
    ident = (np.eye(nx), np.eye(disc.m), np.eye(nx))
    for it in range(max_iters + 1):
        A, B, F2 = obj.linearize(traj, method == "second", threads)
        g = obj.gradient(traj, A, B)
        direction = _lq_direction(obj, traj, A, B, gn, F2) if method == "second" else None
        if direction is None:
            direction = _lq_direction(obj, traj, A, B, gn if method == "second" else ident)
        dX, dU = _propagate(A, B, *direction)
        dnorm = float(np.linalg.norm(dU))
        slope = float(np.sum(g * dU))
        if method == "second" and slope >= 0 and dnorm > tol:
            dX, dU = _propagate(A, B, *_lq_direction(obj, traj, A, B, gn))
            dnorm, slope = float(np.linalg.norm(dU)), float(np.sum(g * dU))
        record = {"cost": J, "descent_norm": dnorm, "step_size": 0.0}
        if dnorm <= tol:
            log.iterations.append(record)
            log.converged = True
            break
        if it == max_iters:
            log.iterations.append(record)
            break
        Kp = solve_lqr(LqrProblem(A, B, np.concatenate(
            [np.broadcast_to(weights.Q, (N, nx, nx)), weights.Qf[None]]), weights.R)).K
        alpha = 1.0
        for _ in range(max_halvings):
            try:
                trial = _project(disc, obj.x0, traj.x, traj.inputs, dX, dU, Kp, alpha)
                Jn = obj.cost_of(trial)
            except (StepError, SingularityError, EvaluationError):
                Jn = np.inf
            if Jn <= J + armijo * alpha * slope:
                break
            alpha *= 0.5
        else:
            log.iterations.append(record)
            break
        record["step_size"] = alpha
        log.iterations.append(record)
        traj, J = trial, Jn
    return traj, log


def cost_gradient(disc, reference, U, weights=None):
    """Cost and adjoint gradient with respect to the flattened inputs ``U``."""
    weights = weights or default_weights(disc.n, disc.m)
    obj = _Objective(disc, reference, weights)
    traj = simulate(disc, obj.x0, np.asarray(U, dtype=float).reshape(reference.N, disc.m))
    A, B, _ = obj.linearize(traj)
    return obj.cost_of(traj), obj.gradient(traj, A, B).reshape(-1)


def tracking_cost(disc, reference, U, weights=None):
    """Cost of the input sequence ``U`` through the nonlinear simulator."""
    weights = weights or default_weights(disc.n, disc.m)
    return _Objective(disc, reference, weights).cost(
        np.asarray(U, dtype=float).reshape(reference.N, disc.m))


def step_reference(N=100, dt=0.1, target=np.pi, start=0.0, inputs=1):
    """Infeasible step reference: ``start`` for ``k < N/2``, ``target`` after.

    ``target`` and ``start`` are configurations (scalars for one degree of
    freedom); reference momenta and inputs are zero.
    """
    target = np.atleast_1d(np.asarray(target, dtype=float))
    start = np.broadcast_to(np.asarray(start, dtype=float), target.shape)
    zero = np.zeros_like(target)
    states = [DiscreteState(start if k < N / 2 else target, zero) for k in range(N + 1)]
    return Trajectory(dt, states, np.zeros((N, inputs)))
