"""Scenario files: line-oriented ``key = value`` with ``[system]``, ``[run]``, ``[task]``.

Example::

    [system]
    template = pendulum

    [run]
    dt = 0.1
    steps = 1
    q0 = [0.2]
    p0 = [0.5]
    inputs = [0.8]

    [task]
    kind = simulate

Numbers are decimal, vectors are bracketed comma lists, ``#`` starts a
comment. Inputs are constant (``inputs``), tabulated (``inputs_file``, a
CSV with ``steps`` rows and one column per input) or per-input expressions
of ``k``, ``t`` and ``pi`` (``input.<name>``). Inputs not given are zero.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import ExprGraph, const, parse_expr, var
from ..autodiff.evaluate import evaluate_all
from ..exceptions import ScenarioError
from .systext import parse_list, parse_number, system_from_entries

SECTIONS = ("system", "run", "task")
TASKS = ("simulate", "linearize", "check-singularity", "lqr", "optimize")

RUN_KEYS = {"dt", "steps", "q0", "p0", "inputs", "inputs_file"}
TASK_KEYS = {
    "simulate": set(),
    "linearize": {"order"},
    "check-singularity": set(),
    "lqr": {"reference", "perturbation", "config_weight", "input_weight", "method", "target",
            "tol", "max_iters", "window"},
    "optimize": {"reference", "method", "target", "tol", "max_iters", "config_weight",
                 "input_weight"},
}


def lex(text, allowed=SECTIONS, default=None):
    """Split text into ``{section: {key: (value, line)}}`` preserving order."""
    sections = {}
    current = default
    if default is not None:
        sections[default] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(f"malformed section header {line!r}", line=lineno)
            name = line[1:-1].strip()
            if name not in allowed:
                raise ScenarioError(f"unknown section [{name}]; expected one of "
                                    f"{', '.join(f'[{s}]' for s in allowed)}", line=lineno)
            if name in sections and (name != default or sections[name]):
                raise ScenarioError(f"section [{name}] appears twice", line=lineno)
            sections[name] = {}
            current = name
            continue
        if "=" not in line:
            raise ScenarioError(f"expected 'key = value', got {line!r}", line=lineno)
        if current is None:
            raise ScenarioError("key outside of a section", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ScenarioError(f"invalid key {key!r}", line=lineno)
        if not value:
            raise ScenarioError(f"missing value for {key!r}", line=lineno)
        entries = sections[current]
        if key in entries:
            raise ScenarioError(f"duplicate key {key!r} in [{current}] "
                                f"(first defined on line {entries[key][1]}, again on line {lineno})",
                                line=lineno)
        entries[key] = (value, lineno)
    return sections


@dataclass
class Scenario:
    """Parsed scenario with defaults filled in."""

    name: str
    system: object
    dt: float
    N: int
    q0: np.ndarray
    p0: np.ndarray
    inputs: np.ndarray
    task: str
    options: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def x0(self):
        return np.concatenate([self.q0, self.p0])


def _vector(value, line, n, what, names=None):
    items = parse_list(value, line, what)
    if len(items) != n:
        label = f" ({', '.join(names)})" if names else ""
        raise ScenarioError(f"{what} has {len(items)} entries, expected n = {n}{label}", line=line)
    return np.array([parse_number(t, line, what) for t in items])


def _int(value, line, what, minimum):
    v = parse_number(value, line, what)
    if v != int(v):
        raise ScenarioError(f"{what} must be an integer", line=line)
    if v < minimum:
        raise ScenarioError(f"{what} must be at least {minimum}, got {int(v)}", line=line)
    return int(v)


def _positive(value, line, what):
    v = parse_number(value, line, what)
    if not v > 0:
        raise ScenarioError(f"{what} must be positive", line=line)
    return v


def _choice(value, line, what, options):
    v = value.strip()
    if v not in options:
        raise ScenarioError(f"{what} must be one of {', '.join(options)}; got {v!r}", line=line)
    return v


def _input_expr(value, line, N, dt):
    names = {"k": var("k"), "t": var("t"), "pi": const(math.pi)}
    e = parse_expr(value, lambda n: names.get(n), line=line)
    graph = ExprGraph([e], ["k", "t"])
    out = np.empty(N)
    for k in range(N):
        out[k] = evaluate_all(graph, np.array([k, k * dt]))[0]
    if not np.all(np.isfinite(out)):
        raise ScenarioError("input expression is not finite over the horizon", line=line)
    return out


def _inputs(run, system, N, dt, base):
    m = system.m
    U = np.zeros((N, m))
    spec = {"kind": "zero"}
    if "inputs" in run and "inputs_file" in run:
        raise ScenarioError("give either 'inputs' or 'inputs_file', not both",
                            line=run["inputs_file"][1])
    if "inputs" in run:
        value, line = run["inputs"]
        U[:] = _vector(value, line, m, "inputs", system.inputs).reshape(1, m) if m else 0
        spec = {"kind": "constant", "value": U[0].tolist() if N else []}
    if "inputs_file" in run:
        value, line = run["inputs_file"]
        path = Path(value)
        if not path.is_absolute() and base is not None:
            path = base / path
        if not path.is_file():
            raise ScenarioError(f"inputs_file {value!r} does not exist", line=line)
        try:
            table = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
        except ValueError:
            table = np.loadtxt(path, delimiter=",", ndmin=2, comments="#", skiprows=1)
        if table.shape != (N, m):
            raise ScenarioError(f"inputs_file has shape {table.shape}, expected ({N}, {m})",
                                line=line)
        U[:] = table
        spec = {"kind": "table", "file": value}
    exprs = {}
    for key, (value, line) in run.items():
        if key.startswith("input."):
            name = key[6:]
            if name not in system.inputs:
                raise ScenarioError(f"unknown input {name!r}; inputs are {list(system.inputs)}",
                                    line=line)
            U[:, system.inputs.index(name)] = _input_expr(value, line, N, dt)
            exprs[name] = value.strip()
    if exprs:
        spec = {"kind": "expression", "base": spec, "expressions": exprs}
    return U, spec


def parse_scenario(text, name="scenario", strict=False, base=None):
    """Parse scenario text. ``base`` resolves relative ``inputs_file`` paths.

    With ``strict`` unknown keys are errors, otherwise they are recorded in
    ``Scenario.warnings``.
    """
    sections = lex(text)
    warnings = []

    def unknown(entries, allowed, where, prefixes=()):
        for key, (_, line) in entries.items():
            if key in allowed or key.startswith(prefixes):
                continue
            msg = f"unknown key {key!r} in [{where}]"
            if strict:
                raise ScenarioError(msg, line=line)
            warnings.append(f"line {line}: {msg}")

    for s in ("system", "run"):
        if s not in sections:
            raise ScenarioError(f"missing [{s}] section")
    system = system_from_entries(sections["system"], strict, warnings.append)
    run = sections["run"]
    unknown(run, RUN_KEYS, "run", ("input.",))
    for key in ("dt", "steps"):
        if key not in run:
            raise ScenarioError(f"[run] needs '{key}'")
    dt = _positive(*run["dt"], "dt")
    N = _int(*run["steps"], "steps", 1)
    n = system.n
    q0 = _vector(*run["q0"], n, "q0", system.coordinates) if "q0" in run else np.zeros(n)
    p0 = _vector(*run["p0"], n, "p0", system.coordinates) if "p0" in run else np.zeros(n)
    U, input_spec = _inputs(run, system, N, dt, base)

    task_entries = sections.get("task", {})
    kind = _choice(*task_entries["kind"], "kind", TASKS) if "kind" in task_entries else "simulate"
    unknown(task_entries, TASK_KEYS[kind] | {"kind"}, "task")
    options = _task_options(kind, task_entries, system, N)
    if options.get("reference") == "step" and system.m == 0:
        raise ScenarioError("optimization needs a system with inputs")
    source = {
        "system": {k: v for k, (v, _) in sections["system"].items()},
        "run": {k: v for k, (v, _) in run.items()},
        "task": {k: v for k, (v, _) in task_entries.items()},
        "inputs": input_spec,
    }
    return Scenario(name, system, dt, N, q0, p0, U, kind, options, source, warnings)


def _task_options(kind, t, system, N):
    n = system.n
    opts = {}
    if kind == "linearize":
        opts["order"] = int(_choice(*t["order"], "order", ("1", "2"))) if "order" in t else 1
    if kind in ("lqr", "optimize"):
        opts["config_weight"] = (parse_number(*t["config_weight"], "config_weight")
                                 if "config_weight" in t else 100.0)
        opts["input_weight"] = (_positive(*t["input_weight"], "input_weight")
                                if "input_weight" in t else 1.0)
        if opts["config_weight"] < 0:
            raise ScenarioError("config_weight must be nonnegative", line=t["config_weight"][1])
        default_ref = "step" if kind == "optimize" else "simulate"
        refs = ("step",) if kind == "optimize" else ("simulate", "step")
        opts["reference"] = (_choice(*t["reference"], "reference", refs)
                             if "reference" in t else default_ref)
        methods = ("second", "first", "both") if kind == "optimize" else ("second", "first")
        opts["method"] = _choice(*t["method"], "method", methods) if "method" in t else "second"
        opts["target"] = (_vector(*t["target"], n, "target", system.coordinates)
                          if "target" in t else np.full(n, math.pi))
        opts["tol"] = _positive(*t["tol"], "tol") if "tol" in t else 1e-6
        opts["max_iters"] = _int(*t["max_iters"], "max_iters", 1) if "max_iters" in t else 1000
    if kind == "lqr":
        if "perturbation" in t:
            value, line = t["perturbation"]
            items = parse_list(value, line, "perturbation")
            if len(items) == 2 * n:
                opts["perturbation"] = np.array([parse_number(s, line, "perturbation")
                                                 for s in items])
            else:
                opts["perturbation"] = _vector(value, line, n, "perturbation", system.coordinates)
        else:
            opts["perturbation"] = np.zeros(n)
        opts["window"] = _int(*t["window"], "window", 1) if "window" in t else max(1, N // 10)
        if opts["window"] > N:
            raise ScenarioError(f"window must be at most steps = {N}", line=t["window"][1])
    return opts


def load_scenario(path, strict=False):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {str(path)!r}: {exc.strerror}") from None
    return parse_scenario(text, name=path.stem, strict=strict, base=path.parent)
