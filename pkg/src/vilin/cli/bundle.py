"""Result bundle: CSV/JSON outputs plus a deterministic manifest.

Files are collected in memory and written only when the run succeeds, so a
failed run leaves no partial bundle. ``timings.json`` is the only file whose
content varies between identical runs; it is kept out of the manifest.
"""

import hashlib
import json
import platform
from pathlib import Path

import numba
import numpy as np
import scipy
import sklearn

from .. import __version__
from .._linalg import COND_THRESHOLD
from ..control import armijo_constant
from ..integrator import CONSTRAINT_TOL, FAULT_CONDITION, MAX_ITERS, TOL
from ..linearizer import FD_STEPS


def fmt(v):
    """Shortest round-tripping decimal text of a float."""
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


class Bundle:
    def __init__(self, out, scenario, threads=1):
        self.out = Path(out)
        self.scenario = scenario
        self.threads = threads
        self.files = {}
        self.flags = []
        self.verify = None
        self.tolerances = {
            "newton_residual": TOL,
            "newton_max_iters": MAX_ITERS,
            "constraint_residual": CONSTRAINT_TOL,
            "condition_threshold": COND_THRESHOLD,
            "step_fault_condition": FAULT_CONDITION,
            "fd_steps": dict(FD_STEPS),
        }
        opts = scenario.options
        if "tol" in opts:
            self.tolerances["optimizer_descent_norm"] = opts["tol"]
            self.tolerances["optimizer_max_iters"] = opts["max_iters"]
            self.tolerances["armijo_constant"] = armijo_constant

    def text(self, name, text):
        self.files[name] = text.encode()

    def json(self, name, obj):
        self.text(name, dumps(obj))

    def trajectory(self, name, traj, energy=True):
        n = traj.states[0].q.shape[0]
        m = traj.inputs.shape[1]
        c = traj.lambdas.shape[1]
        cols = (["k", "t"] + [f"q{i}" for i in range(n)] + [f"p{i}" for i in range(n)]
                + [f"u{i}" for i in range(m)] + [f"lambda{i}" for i in range(c)])
        if energy:
            cols.append("energy")
        rows = [",".join(cols)]
        N = traj.N
        for k, st in enumerate(traj.states):
            vals = [str(k), fmt(k * traj.dt)] + [fmt(v) for v in st.q] + [fmt(v) for v in st.p]
            if k < N:
                vals += [fmt(v) for v in traj.inputs[k]] + [fmt(v) for v in traj.lambdas[k]]
                if energy:
                    vals.append(fmt(traj.energies[k]) if traj.energies is not None else "nan")
            else:
                vals += ["nan"] * (m + c + int(energy))
            rows.append(",".join(vals))
        self.text(name, "\n".join(rows) + "\n")

    def linearization(self, lins, order):
        rows = ["k,matrix,row,col,value"]
        records = []
        for k, (first, _) in enumerate(lins):
            for label, mat in (("A", first.A), ("B", first.B)):
                rows += _long(f"{k},{label}", mat)
            records.append({"k": k, "A": first.A, "B": first.B})
        self.text("linearization.csv", "\n".join(rows) + "\n")
        if order == 2:
            rows = ["k,output,index,row,col,value"]
            for k, (_, second) in enumerate(lins):
                for label, H in (("q", second.q), ("p", second.p)):
                    for i, Hi in enumerate(H):
                        rows += _long(f"{k},{label},{i}", Hi)
                records[k]["hessian_q"] = second.q
                records[k]["hessian_p"] = second.p
            self.text("linearization2.csv", "\n".join(rows) + "\n")
        self.json("linearization.json", {"order": order, "steps": records})

    def gains(self, sol):
        rows = ["k,row,col,value"]
        for k, K in enumerate(sol.K):
            rows += _long(str(k), K)
        self.text("gains.csv", "\n".join(rows) + "\n")
        rows = ["k,row,col,value"]
        for k, P in enumerate(sol.P):
            rows += _long(str(k), P)
        self.text("riccati.csv", "\n".join(rows) + "\n")

    def manifest(self):
        sc = self.scenario
        sysm = sc.system
        return {
            "scenario": sc.name,
            "task": sc.task,
            "system": {"name": sysm.name, "coordinates": list(sysm.coordinates),
                       "inputs": list(sysm.inputs), "params": dict(sysm.params),
                       "n": sysm.n, "m": sysm.m, "c": sysm.c},
            "run": {"dt": sc.dt, "steps": sc.N, "q0": sc.q0, "p0": sc.p0},
            "options": sc.options,
            "source": sc.source,
            "threads": self.threads,
            "versions": {"vilin": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "numba": numba.__version__,
                         "scikit-learn": sklearn.__version__,
                         "python": platform.python_version()},
            "tolerances": self.tolerances,
            "singularity_flags": self.flags,
            "verify": self.verify,
            "files": {name: hashlib.sha256(data).hexdigest()
                      for name, data in sorted(self.files.items())},
            "timings_file": "timings.json",
        }

    def finish(self, timings):
        manifest = dumps(self.manifest()).encode()
        self.out.mkdir(parents=True, exist_ok=True)
        for name, data in self.files.items():
            (self.out / name).write_bytes(data)
        (self.out / "manifest.json").write_bytes(manifest)
        (self.out / "timings.json").write_text(dumps(timings))


def _long(prefix, mat):
    mat = np.asarray(mat)
    return [f"{prefix},{i},{j},{fmt(mat[i, j])}"
            for i in range(mat.shape[0]) for j in range(mat.shape[1])]
