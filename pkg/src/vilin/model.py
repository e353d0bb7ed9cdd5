"""Mechanical system declarations and their midpoint discretization.

A :class:`MechSystem` holds the Lagrangian ``L(q, qdot)``, the generalized
forcing ``F(q, qdot, u)`` and the holonomic constraints ``h(q)`` as
expression graphs. :func:`discretize` composes them with the midpoint rule

    L_d(q_k, q_{k+1}) = dt * L((q_k + q_{k+1}) / 2, (q_{k+1} - q_k) / dt)
    F_d^-(q_k, q_{k+1}, u_k) = dt * F((q_k + q_{k+1}) / 2, (q_{k+1} - q_k) / dt, u_k)
    F_d^+ = 0

and :func:`slots` evaluates the slot derivatives of ``L_d`` and ``F_d^\\pm``
needed by the integrator and the linearizer.
"""

from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from ._fastpath import run_many, tape_args
from .autodiff import ExprGraph, as_expr, substitute, var
from .autodiff.evaluate import run
from .exceptions import EvaluationError


def velocity_name(q):
    return f"{q}_dot"


@dataclass(frozen=True, eq=False)
class MechSystem:
    """A forced mechanical system with holonomic constraints.

    Variables of the graphs are referenced by name: coordinates ``q``,
    velocities ``q + "_dot"``, inputs, and the parameter names in ``params``.
    ``forcing`` has one output per coordinate and ``constraints`` one output
    per constraint (``None`` when there are none).
    """

    coordinates: tuple
    inputs: tuple
    lagrangian: ExprGraph
    forcing: ExprGraph = None
    constraints: ExprGraph = None
    params: dict = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "coordinates", tuple(self.coordinates))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        n = len(self.coordinates)
        if n == 0:
            raise ValueError("a system needs at least one coordinate")
        names = list(self.coordinates) + list(self.velocities) + list(self.inputs)
        if len(set(names)) != len(names) or set(names) & set(self.params):
            raise ValueError("coordinate, velocity, input and parameter names must be distinct")
        q, qd, u, pr = set(self.coordinates), set(self.velocities), set(self.inputs), set(self.params)
        _check_vars(self.lagrangian, q | qd | pr, "lagrangian", 1)
        if self.forcing is not None:
            _check_vars(self.forcing, q | qd | u | pr, "forcing", n)
        if self.constraints is not None:
            _check_vars(self.constraints, q | pr, "constraints", None)
            if self.constraints.n_outputs >= n:
                raise ValueError(
                    f"{self.constraints.n_outputs} constraints leave no freedom for {n} coordinates")

    def __deepcopy__(self, memo):
        # immutable, so copies (e.g. sklearn clone) share the instance
        return self

    @property
    def velocities(self):
        return tuple(velocity_name(q) for q in self.coordinates)

    @property
    def n(self):
        return len(self.coordinates)

    @property
    def m(self):
        return len(self.inputs)

    @property
    def c(self):
        return 0 if self.constraints is None else self.constraints.n_outputs

    def param_values(self):
        return np.array([self.params[p] for p in self.params], dtype=float)

    def lagrangian_value(self, q, qdot):
        """Continuous Lagrangian at a configuration and velocity."""
        x = np.concatenate([q, qdot, self.param_values()])
        return float(run(self.lagrangian, _align(self.lagrangian, self._lag_names(), x),
                         _no_pos(self.lagrangian), 0)[0][0])

    def energy(self, q, qdot):
        """Continuous energy ``qdot . dL/dqdot - L``."""
        names = self._lag_names()
        x = _align(self.lagrangian, names, np.concatenate([q, qdot, self.param_values()]))
        pos = np.full(len(self.lagrangian.variables), -1, dtype=np.int64)
        index = {v: i for i, v in enumerate(self.lagrangian.variables)}
        for k, v in enumerate(self.velocities):
            if v in index:
                pos[index[v]] = k
        vals, G, _, _ = run(self.lagrangian, x, pos, 1)
        grad = G[0] if G.shape[1] else np.zeros(self.n)
        grad = np.pad(grad, (0, self.n - grad.shape[0]))
        return float(np.dot(qdot, grad) - vals[0])

    def energies(self, Q, Qdot):
        """:meth:`energy` at every row of ``Q`` and ``Qdot`` in one compiled pass."""
        Q, Qdot = np.atleast_2d(Q), np.atleast_2d(Qdot)
        P = np.tile(self.param_values(), (Q.shape[0], 1))
        names = self._lag_names()
        index = {v: i for i, v in enumerate(names)}
        cols = [index[v] for v in self.lagrangian.variables]
        X = np.ascontiguousarray(np.hstack([Q, Qdot, P])[:, cols])
        vel = {v: k for k, v in enumerate(self.velocities)}
        pos = np.array([vel.get(v, -1) for v in self.lagrangian.variables], dtype=np.int64)
        vals, G, bad = run_many(tape_args(self.lagrangian), X, pos, self.n, 1)
        if bad >= 0:
            # the pointwise path raises the descriptive error
            self.energy(Q[bad], Qdot[bad])
        return np.einsum("pi,pi->p", Qdot, G[:, 0, :]) - vals[:, 0]

    def _lag_names(self):
        return list(self.coordinates) + list(self.velocities) + list(self.params)


def _check_vars(graph, allowed, what, n_out):
    extra = set(graph.variables) - allowed
    if extra:
        raise ValueError(f"{what} references undeclared names {sorted(extra)}")
    if n_out is not None and graph.n_outputs != n_out:
        raise ValueError(f"{what} must have {n_out} outputs, got {graph.n_outputs}")


def _align(graph, names, x):
    """Reorder values given for ``names`` into the graph's variable order."""
    index = {v: i for i, v in enumerate(names)}
    return x[[index[v] for v in graph.variables]]


def _no_pos(graph):
    return np.full(len(graph.variables), -1, dtype=np.int64)


def make_system(coordinates, lagrangian, *, inputs=(), forcing=None, constraints=None,
                params=None, name="custom"):
    """Build a :class:`MechSystem` from expressions.

    ``forcing`` is a sequence of ``n`` expressions (or ``None`` for an
    unforced system); ``constraints`` a sequence of expressions in the
    coordinates.
    """
    coordinates = tuple(coordinates)
    inputs = tuple(inputs)
    params = dict(params or {})
    vel = [velocity_name(q) for q in coordinates]
    pnames = list(params)
    lag = ExprGraph([as_expr(lagrangian)], list(coordinates) + vel + pnames)
    forc = None
    if forcing is not None:
        forc = ExprGraph([as_expr(f) for f in forcing],
                         list(coordinates) + vel + list(inputs) + pnames)
    cons = None
    if constraints:
        cons = ExprGraph([as_expr(h) for h in constraints], list(coordinates) + pnames)
    return MechSystem(coordinates, inputs, lag, forc, cons, params, name)


def slot_names(system):
    """Interleaved variable names ``(q0[k], q0[k+1], q1[k], ...)`` of ``L_d``.

    Interleaving keeps the derivative index ranges of chain-like systems
    compact, which the propagation kernel exploits.
    """
    names = []
    for q in system.coordinates:
        names += [f"{q}[k]", f"{q}[k+1]"]
    return names


@dataclass(frozen=True, eq=False)
class Discretization:
    """Midpoint discretization of a :class:`MechSystem` with timestep ``dt``.

    ``ld`` is a graph in the interleaved slot variables and the parameters;
    ``fminus``/``fplus`` have ``n`` outputs in the slot variables, the
    inputs ``u_k`` and the parameters. By construction the discrete forces
    never reference ``u_{k+1}``.
    """

    system: MechSystem
    dt: float
    ld: ExprGraph
    fminus: ExprGraph
    fplus: ExprGraph

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        self._set("_perm", np.array([2 * i for i in range(n)] + [2 * i + 1 for i in range(n)]))
        self._set("_params", self.system.param_values())
        self._set("_fminus_zero", self.fminus.is_constant())
        self._set("_fplus_zero", self.fplus.is_constant())
        # values of constant forces, evaluated once
        self._set("_fconst", {
            which: (np.zeros(n) if g.n_outputs == 0 else _const_outputs(g)) if zero else None
            for which, g, zero in (("minus", self.fminus, self._fminus_zero),
                                   ("plus", self.fplus, self._fplus_zero))})
        nvar = 2 * n
        # derivative positions of the slot variables (and inputs for forces)
        self._set("_ld_pos", np.array(list(range(nvar)) + [-1] * len(self.system.params),
                                      dtype=np.int64))
        self._set("_f_pos", np.array(list(range(nvar + m)) + [-1] * len(self.system.params),
                                     dtype=np.int64))
        self._set("_wperm", np.concatenate([self._perm, np.arange(nvar, nvar + m)]))
        # compiled Newton loop: unconstrained systems with a constant F_d^+
        fast = None
        if self.system.c == 0 and self._fplus_zero:
            fast = (tape_args(self.ld), tape_args(self.fminus),
                    np.zeros(n) if self._fconst["minus"] is None else self._fconst["minus"],
                    self._fminus_zero, self._fconst["plus"])
        self._set("_fast", fast)

    def _set(self, name, value):
        object.__setattr__(self, name, value)

    def __deepcopy__(self, memo):
        # immutable, so copies (e.g. sklearn clone) share the instance
        return self

    @property
    def n(self):
        return self.system.n

    @property
    def m(self):
        return self.system.m

    @property
    def c(self):
        return self.system.c

    def _slot_values(self, qk, qn):
        x = np.empty(2 * self.n)
        x[0::2] = qk
        x[1::2] = qn
        return x

    def ld_derivatives(self, qk, qn, order):
        """Value, gradient, Hessian and third tensor of ``L_d`` in block order.

        Block order is ``(q_k[0..n), q_{k+1}[0..n))``.
        """
        x = np.concatenate([self._slot_values(qk, qn), self._params])
        vals, G, H, T = run(self.ld, x, self._ld_pos, order, context="discrete Lagrangian")
        p = self._perm
        g = G[0][p]
        h = H[0][np.ix_(p, p)] if order >= 2 else None
        t = T[0][np.ix_(p, p, p)] if order >= 3 else None
        return vals[0], g, h, t

    def force_derivatives(self, which, qk, qn, u, order):
        """Values and derivatives of ``F_d^-`` or ``F_d^+`` over ``(q_k, q_{k+1}, u_k)``."""
        graph, zero = ((self.fminus, self._fminus_zero) if which == "minus"
                       else (self.fplus, self._fplus_zero))
        n, m = self.n, self.m
        nw = 2 * n + m
        if zero:
            vals = self._fconst[which].copy()
            return (vals, np.zeros((n, nw)), np.zeros((n, nw, nw)) if order >= 2 else None,
                    np.zeros((n, nw, nw, nw)) if order >= 3 else None)
        x = np.concatenate([self._slot_values(qk, qn), np.asarray(u, dtype=float), self._params])
        vals, G, H, T = run(graph, x, self._f_pos, order, context=f"discrete force {which}")
        w = self._wperm
        jac = G[:, w]
        hess = H[:, w][:, :, w] if order >= 2 else None
        third = T[:, w][:, :, w][:, :, :, w] if order >= 3 else None
        return vals, jac, hess, third

    def constraint_derivatives(self, q, order):
        """``h(q)`` with its Jacobian, Hessians and third derivatives (``c`` leading axis)."""
        cons = self.system.constraints
        x = np.concatenate([np.asarray(q, dtype=float), self._params])
        x = _align(cons, list(self.system.coordinates) + list(self.system.params), x)
        index = {v: i for i, v in enumerate(cons.variables)}
        pos = np.full(len(cons.variables), -1, dtype=np.int64)
        qi = [index.get(name) for name in self.system.coordinates]
        for k, i in enumerate(qi):
            if i is not None:
                pos[i] = k
        vals, G, H, T = run(cons, x, pos, order, context="constraints")
        n, c = self.n, self.c
        # coordinates absent from h still get (zero) derivative columns
        K = G.shape[1]
        if K < n:
            G = np.pad(G, ((0, 0), (0, n - K)))
            if order >= 2:
                H = np.pad(H, ((0, 0), (0, n - K), (0, n - K)))
            if order >= 3:
                T = np.pad(T, ((0, 0), (0, n - K), (0, n - K), (0, n - K)))
        return (vals.reshape(c), G.reshape(c, n), H if order >= 2 else None,
                T if order >= 3 else None)


def _const_outputs(graph):
    x = np.zeros(len(graph.variables))
    return run(graph, x, np.full(len(graph.variables), -1, dtype=np.int64), 0)[0]


def discretize(system, dt):
    """Midpoint discrete Lagrangian and discrete forces of ``system``."""
    dt = float(dt)
    if not dt > 0.0:
        raise ValueError(f"timestep must be positive, got {dt}")
    n = system.n
    names = slot_names(system)
    qk = [var(names[2 * i]) for i in range(n)]
    qn = [var(names[2 * i + 1]) for i in range(n)]
    mapping = {}
    for i, q in enumerate(system.coordinates):
        mapping[q] = (qk[i] + qn[i]) * 0.5
        mapping[velocity_name(q)] = (qn[i] - qk[i]) * (1.0 / dt)
    pnames = list(system.params)
    lag = system.lagrangian.output_exprs[0]
    ld = ExprGraph([substitute(lag, mapping) * dt], names + pnames)
    fvars = names + list(system.inputs) + pnames
    if system.forcing is None:
        fminus = ExprGraph([0.0] * n, fvars)
    else:
        fminus = ExprGraph([f * dt for f in substitute(list(system.forcing.output_exprs), mapping)],
                           fvars)
    fplus = ExprGraph([0.0] * n, fvars)
    return Discretization(system, dt, ld, fminus, fplus)


@dataclass(frozen=True)
class SlotDerivatives:
    """Slot derivatives of ``L_d`` and ``F_d^\\pm`` at ``(q_k, q_{k+1}, u_k)``.

    ``ld_grad``/``ld_hess``/``ld_third`` are over ``(q_k, q_{k+1})`` in
    block order; force arrays are over ``w = (q_k, q_{k+1}, u_k)`` with the
    output coordinate as leading axis. Named properties give the blocks,
    e.g. ``D2D1L[i, j] = d^2 L_d / dq_k[i] dq_{k+1}[j]``, so ``D2D1L`` is the
    derivative of the vector ``D1L`` with respect to the second slot.
    Constraint arrays are ``None`` unless requested.
    """

    n: int
    m: int
    order: int
    ld: float
    ld_grad: np.ndarray
    ld_hess: np.ndarray
    ld_third: np.ndarray
    fminus: np.ndarray
    fminus_jac: np.ndarray
    fminus_hess: np.ndarray
    fplus: np.ndarray
    fplus_jac: np.ndarray
    fplus_hess: np.ndarray
    h_k: np.ndarray = None
    dh_k: np.ndarray = None
    d2h_k: np.ndarray = None
    d3h_k: np.ndarray = None
    h_next: np.ndarray = None
    dh_next: np.ndarray = None
    d2h_next: np.ndarray = None
    d3h_next: np.ndarray = None

    @property
    def D1L(self):
        return self.ld_grad[: self.n]

    @property
    def D2L(self):
        return self.ld_grad[self.n:]

    @property
    def D1D1L(self):
        return self.ld_hess[: self.n, : self.n]

    @property
    def D2D1L(self):
        return self.ld_hess[: self.n, self.n:]

    @property
    def D1D2L(self):
        return self.ld_hess[self.n:, : self.n]

    @property
    def D2D2L(self):
        return self.ld_hess[self.n:, self.n:]

    def _fblock(self, jac, slot):
        n = self.n
        return jac[:, [slice(0, n), slice(n, 2 * n), slice(2 * n, 2 * n + self.m)][slot - 1]]

    def DFminus(self, slot):
        """``D_slot F_d^-`` (slot 1, 2 or 3)."""
        return self._fblock(self.fminus_jac, slot)

    def DFplus(self, slot):
        return self._fblock(self.fplus_jac, slot)

    @property
    def M(self):
        """Implicit-function Jacobian ``D2D1L + D2F^-``."""
        return self.D2D1L + self.DFminus(2)

    def third_block(self, out, a, b):
        """``D_b D_a D_out L_d`` as an ``n x n x n`` array (slots are 1 or 2).

        Entry ``[i, j, k]`` is the derivative of component ``i`` of
        ``D_out L_d`` with respect to slot ``a`` index ``j`` and slot ``b``
        index ``k``.
        """
        n = self.n
        s = [slice(0, n), slice(n, 2 * n)]
        return self.ld_third[s[out - 1], s[a - 1], s[b - 1]]


def slots(disc, q_k, q_next, u_k, order=2, with_constraints=False):
    """Evaluate every slot derivative up to ``order`` at one step."""
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    n, m = disc.n, disc.m
    q_k = np.asarray(q_k, dtype=float).reshape(-1)
    q_next = np.asarray(q_next, dtype=float).reshape(-1)
    u_k = np.asarray(u_k, dtype=float).reshape(-1)
    if q_k.shape != (n,) or q_next.shape != (n,) or u_k.shape != (m,):
        raise ValueError(f"expected configurations of size {n} and input of size {m}")
    try:
        ld, g, h, t = disc.ld_derivatives(q_k, q_next, order)
        forder = max(order - 1, 1)
        fm, fmj, fmh, _ = disc.force_derivatives("minus", q_k, q_next, u_k, forder)
        fp, fpj, fph, _ = disc.force_derivatives("plus", q_k, q_next, u_k, forder)
    except EvaluationError as exc:
        exc.context = f"{exc.context}; q_k={q_k.tolist()}, q_next={q_next.tolist()}, u={u_k.tolist()}"
        raise
    extra = {}
    if with_constraints and disc.c:
        corder = max(order, 1)
        for tag, q in (("k", q_k), ("next", q_next)):
            hv, dh, d2h, d3h = disc.constraint_derivatives(q, corder)
            extra.update({f"h_{tag}": hv, f"dh_{tag}": dh, f"d2h_{tag}": d2h, f"d3h_{tag}": d3h})
    return SlotDerivatives(n, m, order, ld, g, h, t, fm, fmj, fmh, fp, fpj, fph, **extra)
