"""Expression graphs with exact derivatives up to third order."""

from .evaluate import DerivativeBundle, derive, derive_all, evaluate, evaluate_all, point_array
from .graph import Expr, ExprGraph, as_expr, const, cos, sin, sqrt, substitute, var
from .text import parse_expr, to_text, to_text_shared

__all__ = [
    "DerivativeBundle",
    "Expr",
    "ExprGraph",
    "as_expr",
    "const",
    "cos",
    "derive",
    "derive_all",
    "evaluate",
    "evaluate_all",
    "parse_expr",
    "point_array",
    "sin",
    "sqrt",
    "substitute",
    "to_text",
    "to_text_shared",
    "var",
]
