"""Text description of a mechanical system (the ``[system]`` section).

Two forms are accepted. A template reference::

    template = pendulum
    param.m = 2.0

and an inline description::

    name = pendulum
    coordinates = [theta]
    inputs = [u]
    param.m = 1.0
    def._t0 = (m * l)
    lagrangian = ...
    force.theta = u
    constraint.0 = ...

``def.<name>`` binds a shared subexpression; ``force.<coordinate>``
defaults to 0 for unlisted coordinates (no ``force`` keys means unforced);
constraints are taken in file order. :func:`system_to_text` writes the
inline form and :func:`parse_system` reads it back into identical graphs.
"""

import re

from ..autodiff import const, parse_expr, to_text_shared, var
from ..exceptions import ScenarioError
from ..model import make_system, velocity_name
from ..systems import TEMPLATES, build

_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")
_RESERVED = {"sin", "cos", "sqrt", "neg"}


def parse_number(text, line=None, what="value"):
    text = text.strip()
    if not _NUMBER.match(text):
        raise ScenarioError(f"{what} must be a decimal number, got {text!r}", line=line)
    return float(text)


def parse_list(text, line=None, what="value"):
    """Items of a bracketed comma list ``[a, b]`` (an unbracketed scalar is one item)."""
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ScenarioError(f"unterminated list in {what}", line=line)
        body = text[1:-1].strip()
        if not body:
            return []
        items = [t.strip() for t in body.split(",")]
        if any(not t for t in items):
            raise ScenarioError(f"empty item in list {what}", line=line)
        return items
    if "," in text or "]" in text:
        raise ScenarioError(f"{what}: vectors must be bracketed, e.g. [1, 2]", line=line)
    return [text]


def parse_names(text, line=None, what="names"):
    names = parse_list(text, line, what)
    for n in names:
        if not _NAME.match(n) or n in _RESERVED:
            raise ScenarioError(f"invalid name {n!r} in {what}", line=line)
    if len(set(names)) != len(names):
        raise ScenarioError(f"duplicate names in {what}", line=line)
    return names


def _fmt(v):
    return repr(float(v))


def system_to_text(system):
    """Inline text of a system, with multiply-used nodes bound by ``def``."""
    roots = list(system.lagrangian.output_exprs)
    nf = 0
    if system.forcing is not None:
        roots += system.forcing.output_exprs
        nf = system.n
    if system.constraints is not None:
        roots += system.constraints.output_exprs
    bindings, texts = to_text_shared(roots)
    lines = ["[system]", f"name = {system.name}",
             f"coordinates = [{', '.join(system.coordinates)}]"]
    if system.inputs:
        lines.append(f"inputs = [{', '.join(system.inputs)}]")
    lines += [f"param.{p} = {_fmt(v)}" for p, v in system.params.items()]
    lines += [f"def.{name} = {text}" for name, text in bindings]
    lines.append(f"lagrangian = {texts[0]}")
    for q, text in zip(system.coordinates, texts[1:1 + nf]):
        lines.append(f"force.{q} = {text}")
    for i, text in enumerate(texts[1 + nf:]):
        lines.append(f"constraint.{i} = {text}")
    return "\n".join(lines) + "\n"


def _template_params(template, entries):
    params = {}
    for key, (value, line) in entries.items():
        name = key[len("param."):]
        if name not in template.defaults:
            raise ScenarioError(f"unknown parameter {name!r} for template {template.name!r}; "
                                f"known: {sorted(template.defaults)}", line=line)
        v = parse_number(value, line, key)
        if isinstance(template.defaults[name], int):
            if v != int(v):
                raise ScenarioError(f"{key} must be an integer", line=line)
            v = int(v)
        params[name] = v
    return params


TEMPLATE_KEYS = {"template"}
INLINE_KEYS = {"name", "coordinates", "inputs", "lagrangian"}
INLINE_PREFIXES = ("param.", "def.", "force.", "constraint.")


def system_from_entries(entries, strict=True, warn=None):
    """Build a system from ``{key: (value, line)}`` of the ``[system]`` section."""
    if "template" in entries:
        value, line = entries["template"]
        name = value.strip()
        if name not in TEMPLATES:
            raise ScenarioError(f"unknown system template {name!r}; available: "
                                f"{sorted(TEMPLATES)}", line=line)
        params, extra = {}, {}
        for key, item in entries.items():
            if key.startswith("param."):
                params[key] = item
            elif key != "template":
                extra[key] = item
        _unknown(extra, "system (template form)", strict, warn)
        try:
            return build(name, **_template_params(TEMPLATES[name], params))
        except ValueError as exc:
            raise ScenarioError(str(exc), line=line) from None
    return _inline(entries, strict, warn)


def _unknown(extra, where, strict, warn):
    for key, (_, line) in extra.items():
        msg = f"unknown key {key!r} in {where}"
        if strict:
            raise ScenarioError(msg, line=line)
        if warn:
            warn(f"line {line}: {msg}")


def _inline(entries, strict, warn):
    def need(key):
        if key not in entries:
            raise ScenarioError(f"[system] needs 'template' or an inline '{key}'")
        return entries[key]

    coords = parse_names(*need("coordinates"), what="coordinates")
    inputs = parse_names(*entries["inputs"], what="inputs") if "inputs" in entries else []
    if not coords:
        raise ScenarioError("a system needs at least one coordinate", line=need("coordinates")[1])
    params, defs, forces, constraints, extra = {}, {}, {}, [], {}
    declared = set(coords) | {velocity_name(q) for q in coords} | set(inputs)
    for key, (value, line) in entries.items():
        if key.startswith("param."):
            name = key[6:]
            if not _NAME.match(name) or name in declared:
                raise ScenarioError(f"invalid parameter name {name!r}", line=line)
            params[name] = parse_number(value, line, key)
        elif key.startswith("def."):
            name = key[4:]
            if not _NAME.match(name) or name in declared or name in _RESERVED:
                raise ScenarioError(f"invalid binding name {name!r}", line=line)
            defs[name] = (value, line)
        elif key.startswith("force."):
            name = key[6:]
            if name not in coords:
                raise ScenarioError(f"force for unknown coordinate {name!r}", line=line)
            forces[name] = (value, line)
        elif key.startswith("constraint."):
            constraints.append((value, line))
        elif key not in INLINE_KEYS:
            extra[key] = (value, line)
    _unknown(extra, "system", strict, warn)
    if set(defs) & set(params):
        raise ScenarioError(f"names bound twice: {sorted(set(defs) & set(params))}")

    leaves = {}
    bound = {}

    def lookup(name, line):
        if name in bound:
            return bound[name]
        if name in defs:
            raise ScenarioError(f"binding {name!r} used before its definition", line=line)
        if name in declared or name in params:
            if name not in leaves:
                leaves[name] = var(name)
            return leaves[name]
        return None

    def expr(value, line):
        return parse_expr(value, lambda n: lookup(n, line), line=line)

    for name, (value, line) in defs.items():
        bound[name] = expr(value, line)
    lag_value, lag_line = need("lagrangian")
    L = expr(lag_value, lag_line)
    forcing = None
    if forces:
        forcing = [expr(*forces[q]) if q in forces else const(0.0) for q in coords]
    cons = [expr(*c) for c in constraints]
    name = entries["name"][0].strip() if "name" in entries else "custom"
    try:
        return make_system(coords, L, inputs=inputs, forcing=forcing, constraints=cons or None,
                           params=params, name=name)
    except ValueError as exc:
        raise ScenarioError(f"invalid system: {exc}", line=lag_line) from None


def parse_system(text, strict=True):
    """Parse a ``[system]`` section (header optional) into a system."""
    from .scenario import lex

    sections = lex(text, allowed=("system",), default="system")
    return system_from_entries(sections.get("system", {}), strict)
