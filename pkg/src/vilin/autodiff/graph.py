"""Expression nodes and the immutable :class:`ExprGraph` built from them.

Expressions are built with ordinary Python operators::

    th, thd, g = var("theta"), var("theta_dot"), var("g")
    L = 0.5 * thd**2 + g * cos(th)
    graph = ExprGraph([L], ["theta", "theta_dot", "g"])

The graph is a DAG: a sub-expression that is reused (bound to a Python name
and used twice) becomes a single node with several consumers.
"""

import numbers

import numpy as np

OPS = ("const", "var", "add", "mul", "neg", "div", "pow", "sin", "cos", "sqrt")
UNARY_OPS = ("neg", "sin", "cos", "sqrt")
BINARY_OPS = ("add", "mul", "div")

# tape opcodes; "div" lowers to mul + recip
OP_CONST, OP_VAR, OP_ADD, OP_MUL = 0, 1, 2, 3
OP_NEG, OP_RECIP, OP_POW, OP_SIN, OP_COS, OP_SQRT = 4, 5, 6, 7, 8, 9
_UNARY_CODES = {"neg": OP_NEG, "sin": OP_SIN, "cos": OP_COS, "sqrt": OP_SQRT}


class Expr:
    """A node of an expression DAG.

    ``op`` is one of :data:`OPS`; ``data`` holds the constant value, the
    variable name or the integer exponent of ``pow``.
    """

    __slots__ = ("op", "args", "data")

    def __init__(self, op, args=(), data=None):
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        self.op = op
        self.args = tuple(args)
        self.data = data

    def __repr__(self):
        from .text import to_text

        return f"Expr({to_text(self)})"

    def __add__(self, other):
        return Expr("add", (self, as_expr(other)))

    def __radd__(self, other):
        return Expr("add", (as_expr(other), self))

    def __sub__(self, other):
        return Expr("add", (self, Expr("neg", (as_expr(other),))))

    def __rsub__(self, other):
        return Expr("add", (as_expr(other), Expr("neg", (self,))))

    def __mul__(self, other):
        return Expr("mul", (self, as_expr(other)))

    def __rmul__(self, other):
        return Expr("mul", (as_expr(other), self))

    def __truediv__(self, other):
        return Expr("div", (self, as_expr(other)))

    def __rtruediv__(self, other):
        return Expr("div", (as_expr(other), self))

    def __neg__(self):
        return Expr("neg", (self,))

    def __pos__(self):
        return self

    def __pow__(self, k):
        if isinstance(k, Expr) and k.op == "const":
            k = k.data
        if not isinstance(k, numbers.Real) or float(k) != int(k):
            raise TypeError(f"only integer exponents are supported, got {k!r}")
        return Expr("pow", (self,), int(k))


def as_expr(x):
    if isinstance(x, Expr):
        return x
    if isinstance(x, numbers.Real):
        return Expr("const", (), float(x))
    raise TypeError(f"cannot convert {type(x).__name__} to an expression")


def const(value):
    return Expr("const", (), float(value))


def var(name):
    if not isinstance(name, str) or not name:
        raise ValueError("variable names must be non-empty strings")
    return Expr("var", (), name)


def sin(x):
    return Expr("sin", (as_expr(x),))


def cos(x):
    return Expr("cos", (as_expr(x),))


def sqrt(x):
    return Expr("sqrt", (as_expr(x),))


def _toposort(outputs):
    """Post-order DFS from the outputs, iterative so deep chains are fine."""
    order, seen = [], set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node.args):
                stack.append((node, i + 1))
                child = node.args[i]
                if id(child) not in seen:
                    stack.append((child, 0))
            elif id(node) not in seen:
                seen.add(id(node))
                order.append(node)
    return order


class Tape:
    """Flat, register-allocated instruction list consumed by the kernels."""

    __slots__ = ("op", "arg0", "arg1", "cval", "vidx", "slot", "n_slots",
                 "origin", "out_nodes", "out_unique", "out_row", "out_first")

    def __init__(self, nodes, index, outputs, variables):
        var_pos = {name: i for i, name in enumerate(variables)}
        op, a0, a1, cval, vidx, origin = [], [], [], [], [], []
        tape_of = {}

        def emit(code, x=-1, y=-1, c=0.0, v=-1, src=-1):
            op.append(code)
            a0.append(x)
            a1.append(y)
            cval.append(c)
            vidx.append(v)
            origin.append(src)
            return len(op) - 1

        for gid, node in enumerate(nodes):
            args = [tape_of[id(a)] for a in node.args]
            if node.op == "const":
                t = emit(OP_CONST, c=node.data, src=gid)
            elif node.op == "var":
                t = emit(OP_VAR, v=var_pos[node.data], src=gid)
            elif node.op == "add":
                t = emit(OP_ADD, args[0], args[1], src=gid)
            elif node.op == "mul":
                t = emit(OP_MUL, args[0], args[1], src=gid)
            elif node.op == "div":
                r = emit(OP_RECIP, args[1], src=gid)
                t = emit(OP_MUL, args[0], r, src=gid)
            elif node.op == "pow":
                t = emit(OP_POW, args[0], c=float(node.data), src=gid)
            else:
                t = emit(_UNARY_CODES[node.op], args[0], src=gid)
            tape_of[id(node)] = t

        n = len(op)
        out_nodes = [tape_of[id(o)] for o in outputs]
        last_use = list(range(n))
        for t in range(n):
            for a in (a0[t], a1[t]):
                if a >= 0:
                    last_use[a] = t
        # slot of the result is taken before operands are released, so a
        # node never writes into the storage of its own operand
        slot, free, n_slots = [0] * n, [], 0
        dies_at = [[] for _ in range(n)]
        for t in range(n):
            if last_use[t] > t:
                dies_at[last_use[t]].append(t)
        for t in range(n):
            if free:
                slot[t] = free.pop()
            else:
                slot[t] = n_slots
                n_slots += 1
            if last_use[t] == t:
                free.append(slot[t])
            for d in dies_at[t]:
                free.append(slot[d])

        self.op = np.asarray(op, dtype=np.int64)
        self.arg0 = np.asarray(a0, dtype=np.int64)
        self.arg1 = np.asarray(a1, dtype=np.int64)
        self.cval = np.asarray(cval, dtype=np.float64)
        self.vidx = np.asarray(vidx, dtype=np.int64)
        self.slot = np.asarray(slot, dtype=np.int64)
        self.n_slots = max(n_slots, 1)
        self.origin = np.asarray(origin, dtype=np.int64)
        self.out_nodes = np.asarray(out_nodes, dtype=np.int64)
        # distinct output rows, so repeated outputs share one derivative row
        self.out_unique, self.out_row = np.unique(self.out_nodes, return_inverse=True)
        self.out_first = np.full(n, -1, dtype=np.int64)
        self.out_first[self.out_unique] = np.arange(self.out_unique.shape[0])


class ExprGraph:
    """Immutable DAG of scalar expressions over an ordered variable list.

    Parameters
    ----------
    outputs : sequence of Expr (or numbers)
        Root expressions; each one is an output of the graph.
    variables : sequence of str, optional
        Ordered variable names. Defaults to the variables found in the
        outputs, in order of first appearance. Every variable referenced by
        a node must be listed.
    """

    def __init__(self, outputs, variables=None):
        if isinstance(outputs, (Expr, numbers.Real)):
            outputs = [outputs]
        outputs = [as_expr(o) for o in outputs]
        nodes = _toposort(outputs)
        found = []
        for node in nodes:
            if node.op == "var" and node.data not in found:
                found.append(node.data)
        if variables is None:
            variables = found
        variables = tuple(variables)
        if len(set(variables)) != len(variables):
            raise ValueError("duplicate variable names")
        missing = [v for v in found if v not in variables]
        if missing:
            raise ValueError(f"undeclared variables: {missing}")
        index = {id(node): i for i, node in enumerate(nodes)}
        self._nodes = tuple(nodes)
        self._outputs = tuple(index[id(o)] for o in outputs)
        self._variables = variables
        self._tape = Tape(nodes, index, outputs, variables)

    @property
    def nodes(self):
        return self._nodes

    @property
    def outputs(self):
        """Node ids of the outputs."""
        return self._outputs

    @property
    def output_exprs(self):
        return tuple(self._nodes[i] for i in self._outputs)

    @property
    def variables(self):
        return self._variables

    @property
    def n_outputs(self):
        return len(self._outputs)

    @property
    def tape(self):
        return self._tape

    def structure(self):
        """Hashable description of the graph; equal graphs have equal structure.

        Leaves are identified by name or value, so two ``var("x")`` nodes
        count as one; sharing of interior nodes is significant.
        """
        key, rows = {}, []
        for node in self._nodes:
            if node.op == "const":
                key[id(node)] = ("const", float(node.data).hex())
            elif node.op == "var":
                key[id(node)] = ("var", node.data)
            else:
                key[id(node)] = len(rows)
                rows.append((node.op, tuple(key[id(a)] for a in node.args), node.data))
        outputs = tuple(key[id(self._nodes[i])] for i in self._outputs)
        return (tuple(rows), outputs, self._variables)

    def __eq__(self, other):
        if not isinstance(other, ExprGraph):
            return NotImplemented
        return self.structure() == other.structure()

    def __hash__(self):
        return hash(self.structure())

    def __len__(self):
        return len(self._nodes)

    def __repr__(self):
        return (f"ExprGraph(n_nodes={len(self._nodes)}, outputs={len(self._outputs)}, "
                f"variables={list(self._variables)})")

    def depends_on(self, names):
        """True if any output references one of ``names``."""
        names = set(names)
        return any(n.op == "var" and n.data in names for n in self._nodes)

    def is_constant(self):
        return not any(n.op == "var" for n in self._nodes)


def substitute(exprs, mapping):
    """Rebuild expressions with variables replaced according to ``mapping``.

    ``mapping`` maps variable names to expressions; unmapped variables are
    kept. Sharing in the input DAG is preserved in the result.
    """
    single = isinstance(exprs, Expr)
    roots = [exprs] if single else list(exprs)
    memo = {}
    for node in _toposort(roots):
        if node.op == "var":
            new = as_expr(mapping[node.data]) if node.data in mapping else node
        elif node.op == "const":
            new = node
        else:
            new = Expr(node.op, tuple(memo[id(a)] for a in node.args), node.data)
        memo[id(node)] = new
    out = [memo[id(r)] for r in roots]
    return out[0] if single else out


def is_zero_const(expr):
    return expr.op == "const" and expr.data == 0.0
