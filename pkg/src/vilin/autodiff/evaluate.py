"""Numeric evaluation and exact differentiation of :class:`ExprGraph` objects."""

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from ..exceptions import EvaluationError, UnassignedVariableError
from . import _kernel

_MESSAGES = {
    _kernel.ERR_DIV0: "division by zero",
    _kernel.ERR_SQRT_NEG: "sqrt of a negative number",
    _kernel.ERR_SQRT_ZERO: "derivative of sqrt at zero",
    _kernel.ERR_POW0: "zero raised to a negative power",
    _kernel.ERR_NONFINITE: "non-finite value",
}


@dataclass(frozen=True)
class DerivativeBundle:
    """Value and partial derivatives of one scalar output.

    ``grad``, ``hess`` and ``third`` are indexed by the ``wrt`` variables in
    the order they were requested; entries above the requested order are
    ``None``.
    """

    value: float
    grad: np.ndarray = None
    hess: np.ndarray = None
    third: np.ndarray = None
    wrt: tuple = ()


def point_array(graph, point):
    """Convert a mapping or sequence into a value array aligned with ``graph.variables``."""
    names = graph.variables
    if isinstance(point, Mapping):
        x = np.empty(len(names))
        for i, name in enumerate(names):
            try:
                x[i] = point[name]
            except KeyError:
                raise UnassignedVariableError(name) from None
        return x
    x = np.asarray(point, dtype=float).reshape(-1)
    if x.shape[0] != len(names):
        raise ValueError(f"expected {len(names)} values for {names}, got {x.shape[0]}")
    return x


def _positions(graph, wrt):
    names = graph.variables
    index = {name: i for i, name in enumerate(names)}
    pos = np.full(len(names), -1, dtype=np.int64)
    for k, w in enumerate(wrt):
        i = index.get(w) if isinstance(w, str) else int(w)
        if i is None or not 0 <= i < len(names):
            raise KeyError(f"{w!r} is not a variable of the graph")
        if pos[i] >= 0:
            raise ValueError(f"variable {w!r} requested twice")
        pos[i] = k
    return pos


def run(graph, x, pos, order, context=None):
    """Low-level entry point: returns ``(values, G, H, T)`` for all outputs.

    ``x`` is aligned with ``graph.variables``; ``pos[i]`` is the derivative
    index of variable ``i`` or -1 for variables held constant.
    """
    tape = graph.tape
    K = int(pos.max()) + 1 if pos.size else 0
    uniq, out_row = tape.out_unique, tape.out_row
    vals, G, H, T, err, bad = _kernel.propagate(
        tape.op, tape.arg0, tape.arg1, tape.cval, tape.vidx, tape.slot, tape.n_slots,
        np.ascontiguousarray(x, dtype=np.float64), pos, K, order, tape.out_first,
        uniq.shape[0])
    if err:
        gid = int(tape.origin[bad])
        raise EvaluationError(_MESSAGES[err], node=gid, op=graph.nodes[gid].op,
                              context=context)
    values = vals[tape.out_nodes]
    if uniq.shape[0] != tape.out_nodes.shape[0]:
        G, H, T = G[out_row], H[out_row], T[out_row]
    return values, G, H, T


def evaluate(graph, point):
    """Value of a single-output graph at ``point`` (mapping or array)."""
    if graph.n_outputs != 1:
        raise ValueError("evaluate() needs a single-output graph; use evaluate_all()")
    return float(evaluate_all(graph, point)[0])


def evaluate_all(graph, point):
    x = point_array(graph, point)
    pos = np.full(len(graph.variables), -1, dtype=np.int64)
    values, *_ = run(graph, x, pos, 0)
    return values


def derive_all(graph, point, wrt, order=2):
    """Values and derivatives of every output.

    Returns arrays ``values (n_out,)``, ``grad (n_out, K)``,
    ``hess (n_out, K, K)`` and ``third (n_out, K, K, K)``; the derivative
    arrays above ``order`` have zero-size trailing axes.
    """
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    wrt = tuple(wrt)
    if not wrt:
        raise ValueError("wrt must name at least one variable")
    x = point_array(graph, point)
    pos = _positions(graph, wrt)
    return run(graph, x, pos, order)


def derive(graph, point, wrt, order=2):
    """Exact derivatives of a single-output graph up to ``order`` (1, 2 or 3)."""
    if graph.n_outputs != 1:
        raise ValueError("derive() needs a single-output graph; use derive_all()")
    values, G, H, T = derive_all(graph, point, wrt, order)
    return DerivativeBundle(
        value=float(values[0]),
        grad=G[0],
        hess=H[0] if order >= 2 else None,
        third=T[0] if order >= 3 else None,
        wrt=tuple(wrt),
    )
