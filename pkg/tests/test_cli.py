"""Scenario parsing, ``vilin run`` exit codes and result bundles."""

import csv
import filecmp
import hashlib
import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vilin.cli import load_scenario, main, parse_scenario
from vilin.exceptions import ScenarioError
from vilin.scenarios import bundled, scenario_path

PEND = """[system]
template = pendulum

[run]
dt = 0.1
steps = {steps}
q0 = [0.2]
p0 = [0.5]
{inputs}

[task]
kind = {kind}
{extra}
"""


def _write(tmp_path, text, name="sc.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _pend(tmp_path, steps=5, inputs="inputs = [0.8]", kind="simulate", extra=""):
    return _write(tmp_path, PEND.format(steps=steps, inputs=inputs, kind=kind, extra=extra))


def _run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# parsing

def test_duplicate_key_names_both_lines(tmp_path):
    text = PEND.format(steps=5, inputs="inputs = [0.8]\ndt = 0.2", kind="simulate", extra="")
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    msg = str(info.value)
    assert "duplicate key 'dt'" in msg
    assert "line 5" in msg and "line 10" in msg


def test_wrong_dimension_names_n(tmp_path):
    text = PEND.format(steps=5, inputs="inputs = [0.8]", kind="simulate", extra="")
    text = text.replace("q0 = [0.2]", "q0 = [0.2, 0.1]")
    with pytest.raises(ScenarioError, match=r"q0 has 2 entries, expected n = 1"):
        parse_scenario(text)


def test_zero_steps_exits_2_without_output(tmp_path, capsys):
    path = _pend(tmp_path, steps=0)
    out = tmp_path / "out"
    code, _, err = _run(["run", path, "--out", out], capsys)
    assert code == 2
    assert "steps" in err
    assert not out.exists()


def test_strict_unknown_key(tmp_path, capsys):
    path = _pend(tmp_path, extra="colour = red")
    code, _, err = _run(["run", path, "--strict", "--out", tmp_path / "a"], capsys)
    assert code == 2 and "colour" in err
    code, _, err = _run(["run", path, "--out", tmp_path / "b"], capsys)
    assert code == 0 and "warning" in err


@pytest.mark.parametrize("text, message", [
    ("[system]\ntemplate = pendulum\n[bogus]\nx = 1\n", "bogus"),
    ("[system]\ntemplate = pendulum\n[system]\ntemplate = pendulum\n", "system"),
    ("[system]\ntemplate = pendulum\nno equals sign\n", "line 3"),
])
def test_lexer_errors(text, message):
    with pytest.raises(ScenarioError, match=message):
        parse_scenario(text)


def test_unknown_task_and_default_inputs():
    with pytest.raises(ScenarioError, match="kind"):
        parse_scenario(PEND.format(steps=3, inputs="inputs = [0.8]", kind="dance", extra=""))
    sc = parse_scenario(PEND.format(steps=3, inputs="", kind="simulate", extra=""))
    assert_allclose(sc.inputs, np.zeros((3, 1)))


def test_input_expressions_and_file(tmp_path):
    sc = parse_scenario(PEND.format(steps=4, inputs="input.u = 0.5 * sin(pi * t) + k",
                                    kind="simulate", extra=""))
    want = [0.5 * math.sin(math.pi * 0.1 * k) + k for k in range(4)]
    assert_allclose(sc.inputs[:, 0], want, rtol=1e-15)
    np.savetxt(tmp_path / "u.csv", np.array([[0.1], [0.2], [0.3]]), delimiter=",")
    path = _pend(tmp_path, steps=3, inputs="inputs_file = u.csv")
    sc = load_scenario(path)
    assert_allclose(sc.inputs[:, 0], [0.1, 0.2, 0.3])
    bad = _pend(tmp_path, steps=4, inputs="inputs_file = u.csv")
    with pytest.raises(ScenarioError, match="3"):
        load_scenario(bad)


# exit codes

def test_step_fault_exit_3(tmp_path, capsys):
    text = ("[system]\ncoordinates = [q]\nlagrangian = 0.5 * q_dot ** 2 + sqrt(q)\n"
            "[run]\ndt = 0.1\nsteps = 100\nq0 = [1.0]\np0 = [-3.0]\n[task]\nkind = simulate\n")
    code, _, err = _run(["run", _write(tmp_path, text), "--out", tmp_path / "o"], capsys)
    assert code == 3
    assert "step fault at step" in err


def test_singularity_exit_4(tmp_path, capsys):
    text = ("[system]\ncoordinates = [q]\nlagrangian = q_dot\n"
            "[run]\ndt = 0.1\nsteps = 3\nq0 = [0.1]\np0 = [0.0]\n[task]\nkind = simulate\n")
    code, _, err = _run(["run", _write(tmp_path, text), "--out", tmp_path / "o"], capsys)
    assert code == 4
    assert "singularity fault at step 0" in err


def test_nonconvergence_exit_5_writes_bundle(tmp_path, capsys):
    path = _pend(tmp_path, steps=20, inputs="", kind="optimize",
                 extra="target = [1.0]\nmax_iters = 1")
    out = tmp_path / "o"
    code, _, err = _run(["run", path, "--out", out], capsys)
    assert code == 5
    assert "did not converge" in err
    log = json.loads((out / "optimization.json").read_text())
    assert log["second"]["converged"] is False
    assert (out / "manifest.json").exists()


# bundles

def test_bundle_is_deterministic(tmp_path, capsys):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, threads in ((a, 1), (b, 1), (c, 3)):
        assert _run(["run", "pend-linearization", "--out", out, "--threads", threads],
                    capsys)[0] == 0
    files = sorted(p.name for p in a.iterdir())
    assert "timings.json" in files
    same = [f for f in files if f != "timings.json"]
    match, mismatch, errors = filecmp.cmpfiles(a, b, same, shallow=False)
    assert mismatch == [] and errors == []
    data = [f for f in same if f != "manifest.json"]
    match, mismatch, errors = filecmp.cmpfiles(a, c, data, shallow=False)
    assert mismatch == [] and errors == []


def test_manifest_hashes_and_tolerances(tmp_path, capsys):
    out = tmp_path / "o"
    _run(["run", "pend-single-step", "--out", out], capsys)
    man = json.loads((out / "manifest.json").read_text())
    for name, digest in man["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert "timings.json" not in man["files"]
    tol = man["tolerances"]
    assert tol["condition_threshold"] == 1e12
    assert {"numpy", "vilin"} <= set(man["versions"])


def test_single_step_bundle_values(tmp_path, capsys):
    out = tmp_path / "o"
    assert _run(["run", "pend-single-step", "--out", out], capsys)[0] == 0
    rows = _rows(out / "trajectory.csv")
    assert len(rows) == 2
    # [PAPER] theta_1 = 0.2471, p_1 = 0.3627
    assert float(rows[1]["q0"]) == pytest.approx(0.2471, abs=5e-4)
    assert float(rows[1]["p0"]) == pytest.approx(0.3627, abs=5e-4)
    assert rows[1]["u0"] == "nan"


def test_linearization_bundle_values(tmp_path, capsys):
    out = tmp_path / "o"
    code, stdout, _ = _run(["run", "pend-linearization", "--out", out, "--verify"], capsys)
    assert code == 0
    assert "fd oracle max error" in stdout
    A = {(r["matrix"], int(r["row"]), int(r["col"])): float(r["value"])
         for r in _rows(out / "linearization.csv")}
    # [PAPER] A and B of the worked step
    assert A[("A", 0, 0)] == pytest.approx(0.9533, abs=5e-4)
    assert A[("A", 1, 0)] == pytest.approx(-0.9333, abs=5e-4)
    assert A[("B", 1, 0)] == pytest.approx(0.09533, abs=5e-4)
    second = _rows(out / "linearization2.csv")
    h = {(r["output"], int(r["row"]), int(r["col"])): float(r["value"]) for r in second}
    assert h[("q", 0, 0)] == pytest.approx(1.01e-2, rel=5e-3)
    man = json.loads((out / "manifest.json").read_text())
    assert man["verify"]["max_error"] <= 1e-4


def test_check_singularity_task(tmp_path, capsys):
    text = ("[system]\ntemplate = spherical_pendulum\n[run]\ndt = 0.1\nsteps = 2\n"
            "q0 = [0.0, 0.0]\np0 = [0.0, 0.1]\ninputs = []\n[task]\nkind = check-singularity\n")
    out = tmp_path / "o"
    code, _, err = _run(["run", _write(tmp_path, text), "--out", out], capsys)
    # the step itself hits the chart singularity at theta = 0
    assert code == 4, err


def test_list_bundled(capsys):
    code, out, _ = _run(["list"], capsys)
    assert code == 0
    assert set(out.split()) == set(bundled())
    assert {"pend-single-step", "chain-lqr"} <= set(bundled())
    assert scenario_path("nope") is None


def test_missing_scenario_exits_2(capsys, tmp_path):
    code, _, err = _run(["run", tmp_path / "missing.ini"], capsys)
    assert code == 2 and "not found" in err


def test_pendulum_closed_loop_scenario(tmp_path, capsys):
    out = tmp_path / "o"
    assert _run(["run", "pend-closed-loop", "--out", out], capsys)[0] == 0
    summary = json.loads((out / "lqr.json").read_text())
    cl = summary["closed_loop"]
    assert cl["initial"] == pytest.approx(math.sqrt(2), rel=1e-12)
    assert cl["final"] < 1e-2 * cl["initial"]
    assert {"gains.csv", "riccati.csv", "closed_loop.csv", "open_loop.csv"} <= {
        p.name for p in out.iterdir()}

