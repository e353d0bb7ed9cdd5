"""Expression graphs: evaluation, exact derivatives, text round-trip, errors."""

import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from vilin.autodiff import (ExprGraph, const, cos, derive, derive_all, evaluate, evaluate_all,
                            parse_expr, sin, sqrt, substitute, to_text, to_text_shared, var)
from vilin.exceptions import EvaluationError, ScenarioError, UnassignedVariableError

NAMES = ("x", "y", "z")
SYMS = sp.symbols(NAMES)


def _leaf():
    return st.one_of(
        st.sampled_from(range(3)).map(lambda i: (var(NAMES[i]), SYMS[i])),
        st.floats(-2, 2, allow_nan=False).map(lambda c: (const(c), sp.Float(c))),
    )


def _extend(children):
    pair = st.tuples(children, children)
    return st.one_of(
        pair.map(lambda p: (p[0][0] + p[1][0], p[0][1] + p[1][1])),
        pair.map(lambda p: (p[0][0] - p[1][0], p[0][1] - p[1][1])),
        pair.map(lambda p: (p[0][0] * p[1][0], p[0][1] * p[1][1])),
        # denominators and radicands kept away from zero
        pair.map(lambda p: (p[0][0] / (2 + sin(p[1][0])), p[0][1] / (2 + sp.sin(p[1][1])))),
        children.map(lambda c: (sqrt(1 + c[0] ** 2), sp.sqrt(1 + c[1] ** 2))),
        children.map(lambda c: (sin(c[0]), sp.sin(c[1]))),
        children.map(lambda c: (cos(c[0]), sp.cos(c[1]))),
        children.map(lambda c: (-c[0], -c[1])),
        st.tuples(children, st.integers(0, 3)).map(lambda t: (t[0][0] ** t[1], t[0][1] ** t[1])),
        children.map(lambda c: ((1 + c[0] ** 2) ** -2, (1 + c[1] ** 2) ** -2)),
    )


exprs = st.recursive(_leaf(), _extend, max_leaves=8)
points = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(exprs, points)
def test_derivatives_match_sympy(pair, point):
    e, s = pair
    graph = ExprGraph([e], list(NAMES))
    subs = dict(zip(SYMS, point))
    d = derive(graph, point, NAMES, order=3)
    scale = 1.0 + abs(float(s.subs(subs)))
    assert d.value == pytest.approx(float(s.subs(subs)), rel=1e-11, abs=1e-11 * scale)
    for i, a in enumerate(SYMS):
        da = sp.diff(s, a)
        assert d.grad[i] == pytest.approx(float(da.subs(subs)), rel=1e-9, abs=1e-9)
        for j, b in enumerate(SYMS[i:], start=i):
            dab = sp.diff(da, b)
            assert d.hess[i, j] == pytest.approx(float(dab.subs(subs)), rel=1e-9, abs=1e-9)
            assert d.hess[j, i] == d.hess[i, j]
            for k, c in enumerate(SYMS[j:], start=j):
                want = float(sp.diff(dab, c).subs(subs))
                assert d.third[i, j, k] == pytest.approx(want, rel=1e-8, abs=1e-8)
                perms = {(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)}
                for p in perms:
                    assert d.third[p] == d.third[i, j, k]


@settings(max_examples=60, deadline=None)
@given(exprs)
def test_text_round_trip_preserves_graph(pair):
    e, _ = pair
    shared = e * e + sin(e)
    for root in (e, shared):
        g = ExprGraph([root], list(NAMES))
        bindings, texts = to_text_shared([root])
        env = {}
        for name, text in bindings:
            env[name] = parse_expr(text, env)
        back = ExprGraph([parse_expr(texts[0], env)], list(NAMES))
        assert back == g


def test_sharing_is_a_single_node():
    x = var("x")
    s = sin(x)
    g = ExprGraph([s * s], ["x"])
    assert sum(n.op == "sin" for n in g.nodes) == 1
    unshared = ExprGraph([sin(x) * sin(x)], ["x"])
    assert sum(n.op == "sin" for n in unshared.nodes) == 2
    assert g != unshared
    assert evaluate(g, {"x": 0.3}) == evaluate(unshared, {"x": 0.3})


def test_pendulum_lagrangian_values():
    th, thd = var("theta"), var("theta_dot")
    L = 0.5 * thd**2 + 9.8 * cos(th)
    g = ExprGraph([L], ["theta", "theta_dot"])
    d = derive(g, {"theta": 0.2, "theta_dot": 0.5}, ["theta", "theta_dot"], order=3)
    assert d.value == pytest.approx(0.125 + 9.8 * math.cos(0.2), rel=1e-15)
    assert_allclose(d.grad, [-9.8 * math.sin(0.2), 0.5], rtol=1e-15)
    assert_allclose(d.hess, [[-9.8 * math.cos(0.2), 0], [0, 1]], rtol=1e-15)
    assert d.third[0, 0, 0] == pytest.approx(9.8 * math.sin(0.2), rel=1e-15)


def test_multi_output_and_constant_graph():
    x, y = var("x"), var("y")
    g = ExprGraph([x * y, x + 1.0, const(2.5)], ["x", "y"])
    assert_allclose(evaluate_all(g, [2.0, 3.0]), [6.0, 3.0, 2.5])
    vals, G, H, _ = derive_all(g, [2.0, 3.0], ["x", "y"], order=2)
    assert_allclose(G, [[3, 2], [1, 0], [0, 0]])
    assert_allclose(H[0], [[0, 1], [1, 0]])
    assert ExprGraph([const(1.0)]).is_constant()


def test_derivative_wrt_subset_and_order():
    x, y = var("x"), var("y")
    g = ExprGraph([x**2 * y], ["x", "y"])
    d = derive(g, [3.0, 2.0], ["y"], order=1)
    assert_allclose(d.grad, [9.0])
    assert d.hess is None
    with pytest.raises(ValueError):
        derive(g, [3.0, 2.0], ["x"], order=4)


def test_unassigned_variable():
    g = ExprGraph([var("x") + var("y")])
    with pytest.raises(UnassignedVariableError, match="'y'"):
        evaluate(g, {"x": 1.0})


@pytest.mark.parametrize("expr, point, message", [
    (lambda x: 1.0 / x, 0.0, "division by zero"),
    (lambda x: sqrt(x), -1.0, "sqrt of a negative"),
    (lambda x: x ** -1, 0.0, "zero raised"),
])
def test_domain_errors_name_the_node(expr, point, message):
    g = ExprGraph([expr(var("x"))], ["x"])
    with pytest.raises(EvaluationError, match=message) as info:
        derive(g, [point], ["x"], order=1)
    assert info.value.node is not None


def test_sqrt_derivative_at_zero_is_an_error():
    g = ExprGraph([sqrt(var("x"))], ["x"])
    assert evaluate(g, [0.0]) == 0.0
    with pytest.raises(EvaluationError):
        derive(g, [0.0], ["x"], order=1)


def test_undeclared_variable_rejected():
    with pytest.raises(ValueError, match="undeclared"):
        ExprGraph([var("x") + var("y")], ["x"])


def test_substitute_preserves_sharing():
    x = var("x")
    s = sin(x)
    e = s * s
    (out,) = substitute([e], {"x": var("a") + 1.0})
    g = ExprGraph([out], ["a"])
    assert sum(n.op == "sin" for n in g.nodes) == 1
    assert evaluate(g, [0.5]) == pytest.approx(math.sin(1.5) ** 2)


def test_to_text_and_parse_errors():
    x = var("x")
    assert to_text(x * 2.0 - 1.0) == "((x * 2.0) + neg(1.0))"
    with pytest.raises(ScenarioError, match="integer"):
        parse_expr("x ** 0.5")
    with pytest.raises(ScenarioError, match="unsupported function"):
        parse_expr("exp(x)")
    with pytest.raises(ScenarioError, match="invalid expression"):
        parse_expr("x +", line=7)


def test_deep_chain_does_not_recurse():
    x = var("x")
    e = x
    for _ in range(5000):
        e = e + x
    g = ExprGraph([e], ["x"])
    d = derive(g, [1.0], ["x"], order=2)
    assert d.value == 5001.0
    assert d.grad[0] == 5001.0
