"""Text form of expressions: printing with shared-node bindings, and parsing.

The printed form is valid Python expression syntax restricted to
``+ - * / **``, the functions ``sin cos sqrt neg``, numeric literals and
names. Nodes used more than once are bound to names so that printing and
parsing back reproduces the same DAG.
"""

import ast

from ..exceptions import ScenarioError
from .graph import Expr, _toposort, as_expr, const, cos, sin, sqrt, var

_FUNCS = {"sin": sin, "cos": cos, "sqrt": sqrt, "neg": lambda x: Expr("neg", (as_expr(x),))}


def _fmt_const(v):
    r = repr(float(v))
    return r if v >= 0 else f"({r})"


def _render(node, names):
    def ref(a):
        return names.get(id(a)) or _render(a, names)

    op = node.op
    if op == "const":
        return _fmt_const(node.data)
    if op == "var":
        return node.data
    if op == "add":
        return f"({ref(node.args[0])} + {ref(node.args[1])})"
    if op == "mul":
        return f"({ref(node.args[0])} * {ref(node.args[1])})"
    if op == "div":
        return f"({ref(node.args[0])} / {ref(node.args[1])})"
    if op == "pow":
        k = node.data
        return f"({ref(node.args[0])} ** {k if k >= 0 else f'({k})'})"
    return f"{op}({ref(node.args[0])})"


def to_text(expr):
    """Single-line text for an expression, shared nodes expanded inline."""
    return _render(expr, {})


def to_text_shared(roots, prefix="_t"):
    """Print several roots, binding every multiply-used node to a name.

    Returns ``(bindings, texts)`` where ``bindings`` is an ordered list of
    ``(name, text)`` definitions and ``texts`` the text of each root.
    """
    nodes = _toposort(roots)
    uses = {}
    for node in nodes:
        for a in node.args:
            uses[id(a)] = uses.get(id(a), 0) + 1
    names, bindings = {}, []
    for node in nodes:
        if node.op in ("const", "var"):
            continue
        if uses.get(id(node), 0) > 1:
            text = _render(node, names)
            name = f"{prefix}{len(bindings)}"
            bindings.append((name, text))
            names[id(node)] = name
    texts = [names.get(id(r)) or _render(r, names) for r in roots]
    return bindings, texts


class _Builder(ast.NodeVisitor):
    def __init__(self, names, line):
        self.names = names
        self.line = line

    def fail(self, msg):
        raise ScenarioError(msg, line=self.line)

    def visit_Expression(self, node):
        return self.visit(node.body)

    def visit_Constant(self, node):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            self.fail(f"unsupported literal {node.value!r}")
        return const(node.value)

    def visit_Name(self, node):
        bound = self.names(node.id)
        if bound is None:
            self.fail(f"unknown name {node.id!r}")
        return bound

    def visit_UnaryOp(self, node):
        if isinstance(node.op, ast.UAdd):
            return self.visit(node.operand)
        if not isinstance(node.op, ast.USub):
            self.fail("unsupported unary operator")
        if isinstance(node.operand, ast.Constant) and isinstance(node.operand.value, (int, float)):
            return const(-node.operand.value)
        return -self.visit(node.operand)

    def visit_BinOp(self, node):
        if isinstance(node.op, ast.Pow):
            k = node.right
            sign = 1
            if isinstance(k, ast.UnaryOp) and isinstance(k.op, ast.USub):
                sign, k = -1, k.operand
            if not (isinstance(k, ast.Constant) and isinstance(k.value, (int, float))
                    and float(k.value) == int(k.value)):
                self.fail("exponent must be an integer literal")
            return self.visit(node.left) ** (sign * int(k.value))
        a, b = self.visit(node.left), self.visit(node.right)
        if isinstance(node.op, ast.Add):
            return a + b
        if isinstance(node.op, ast.Sub):
            return a - b
        if isinstance(node.op, ast.Mult):
            return a * b
        if isinstance(node.op, ast.Div):
            return a / b
        self.fail("unsupported binary operator")

    def visit_Call(self, node):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            self.fail("unsupported function call")
        if len(node.args) != 1 or node.keywords:
            self.fail(f"{node.func.id}() takes exactly one argument")
        return _FUNCS[node.func.id](self.visit(node.args[0]))

    def generic_visit(self, node):
        self.fail(f"unsupported syntax: {type(node).__name__}")


def parse_expr(text, names=None, line=None):
    """Parse expression text into an :class:`Expr`.

    ``names`` maps identifiers to expressions (e.g. earlier bindings); any
    other identifier becomes a variable. Pass a callable to control lookup.
    """
    if names is None:
        lookup = var
    elif callable(names):
        lookup = names
    else:
        def lookup(n):
            return names[n] if n in names else var(n)
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ScenarioError(f"invalid expression {text!r}: {exc.msg}", line=line) from None
    return _Builder(lookup, line).visit(tree)
