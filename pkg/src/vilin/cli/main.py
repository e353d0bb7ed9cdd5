"""``vilin run <scenario>``: run a scenario and write its result bundle.

Exit codes: 0 success, 2 parse/validation error, 3 step fault, 4 singularity
fault, 5 optimizer non-convergence. Each failure prints one diagnostic line
on stderr.
"""

import argparse
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .. import __version__
from ..control import (CostWeights, lqr_problem, optimize_trajectory, rollout_closed_loop,
                       solve_lqr, step_reference)
from ..exceptions import EvaluationError, ScenarioError, SingularityError, StepError
from ..integrator import DiscreteState, perturb_configuration, simulate
from ..linearizer import check_singularity, fd_oracle, linearize_both, linearize_constrained
from ..linearizer import linearize as linearize_first
from ..model import discretize
from ..scenarios import scenario_path
from .bundle import Bundle
from .scenario import load_scenario

EXIT_OK, EXIT_PARSE, EXIT_STEP, EXIT_SINGULAR, EXIT_NONCONVERGED = 0, 2, 3, 4, 5


def _weights(disc, opts):
    Q = np.diag(np.concatenate([np.full(disc.n, opts["config_weight"]), np.ones(disc.n)]))
    return CostWeights(Q, opts["input_weight"] * np.eye(disc.m), Q.copy())


def _first(disc, traj, k):
    if disc.c:
        return linearize_constrained(disc, traj.states[k], traj.inputs[k], traj.steps[k])[0]
    return linearize_first(disc, traj.states[k], traj.inputs[k], traj.steps[k])


def _pool_map(fn, n, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(k) for k in range(n)]


def _optimize(disc, sc, bundle, timer):
    opts = sc.options
    ref = step_reference(sc.N, sc.dt, opts["target"], sc.q0, disc.m)
    weights = _weights(disc, opts)
    methods = ["second", "first"] if opts["method"] == "both" else [opts["method"]]
    logs, result = {}, None
    for method in methods:
        with timer(f"optimize_{method}"):
            traj, log = optimize_trajectory(disc, ref, weights, method=method, tol=opts["tol"],
                                            max_iters=opts["max_iters"], threads=bundle.threads)
        logs[method] = log.as_dict()
        if result is None:
            result = traj
        else:
            bundle.trajectory(f"trajectory_{method}.csv", traj)
    bundle.json("optimization.json", logs)
    bundle.trajectory("reference.csv", ref, energy=False)
    return result, logs


def run_scenario(sc, out, threads=1, verify=False):
    """Run a parsed scenario, writing the bundle into ``out``; returns the exit code."""
    timings = {}

    @contextmanager
    def timer(name):
        t = time.perf_counter()
        yield
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t

    disc = discretize(sc.system, sc.dt)
    bundle = Bundle(out, sc, threads)
    x0 = DiscreteState(sc.q0, sc.p0)
    status = EXIT_OK
    main_traj = None
    if sc.task in ("simulate", "linearize", "check-singularity"):
        with timer("simulate"):
            main_traj = simulate(disc, x0, sc.inputs)
        bundle.trajectory("trajectory.csv", main_traj)
    if sc.task == "linearize":
        order = sc.options["order"]

        def one(k):
            if order == 1:
                return _first(disc, main_traj, k), None
            f, s, _ = linearize_both(disc, main_traj.states[k], main_traj.inputs[k],
                                     main_traj.steps[k])
            return f, s

        with timer("linearize"):
            lins = _pool_map(one, main_traj.N, threads)
        bundle.linearization(lins, order)
    elif sc.task == "check-singularity":
        with timer("check_singularity"):
            reports = [check_singularity(disc, main_traj.states[k].q, main_traj.states[k + 1].q,
                                         main_traj.inputs[k]).as_dict()
                       for k in range(main_traj.N)]
        bundle.json("singularity.json", [{"k": k, **r} for k, r in enumerate(reports)])
        bundle.flags = [{"k": k, "flags": r["flags"]} for k, r in enumerate(reports)
                        if r["flags"]]
    elif sc.task == "optimize":
        main_traj, logs = _optimize(disc, sc, bundle, timer)
        bundle.trajectory("trajectory.csv", main_traj)
        if not all(log["converged"] for log in logs.values()):
            status = EXIT_NONCONVERGED
    elif sc.task == "lqr":
        opts = sc.options
        if opts["reference"] == "step":
            main_traj, logs = _optimize(disc, sc, bundle, timer)
            if not all(log["converged"] for log in logs.values()):
                status = EXIT_NONCONVERGED
        else:
            with timer("simulate"):
                main_traj = simulate(disc, x0, sc.inputs)
        bundle.trajectory("reference.csv", main_traj)
        weights = _weights(disc, opts)
        with timer("linearize"):
            problem = lqr_problem(disc, main_traj, weights, threads)
        with timer("riccati"):
            sol = solve_lqr(problem)
        bundle.gains(sol)
        d = opts["perturbation"]
        if d.shape[0] == 2 * disc.n:
            x = main_traj.states[0].x + d
            xp = DiscreteState(x[:disc.n], x[disc.n:])
        else:
            xp = DiscreteState(perturb_configuration(disc, main_traj.states[0].q, d),
                               main_traj.states[0].p)
        with timer("closed_loop"):
            cl = rollout_closed_loop(disc, xp, main_traj, sol)
        with timer("open_loop"):
            ol = simulate(disc, xp, main_traj.inputs)
        bundle.trajectory("closed_loop.csv", cl)
        bundle.trajectory("open_loop.csv", ol)
        bundle.json("lqr.json", _lqr_summary(main_traj, cl, ol, opts["window"]))
    if verify:
        with timer("verify"):
            bundle.verify = _verify(disc, main_traj, sc.options.get("order", 1))
        print(f"fd oracle max error: {bundle.verify['max_error']:.3e} "
              f"(order {bundle.verify['order']}, steps {bundle.verify['steps']})")
    if not bundle.flags:
        bundle.flags = [{"k": k, "flags": ["M"]} for k, s in enumerate(main_traj.steps or [])
                        if s.m_condition > bundle.tolerances["condition_threshold"]]
    bundle.finish(timings)
    return status


def _lqr_summary(ref, cl, ol, window):
    def errors(traj):
        e = np.linalg.norm(traj.x - ref.x, axis=1)
        return {"initial": float(e[0]), "final": float(e[-1]),
                "window_max": float(e[-window:].max()), "window_min": float(e[-window:].min()),
                "first_below_1e-2": int(np.argmax(e < 1e-2)) if np.any(e < 1e-2) else None}
    return {"window": window, "closed_loop": errors(cl), "open_loop": errors(ol)}


def _verify(disc, traj, order):
    N = traj.N
    ks = sorted({0, N // 2, N - 1})
    errs = [fd_oracle(disc, traj.states[k], traj.inputs[k], order=order).error for k in ks]
    return {"steps": ks, "order": order, "errors": errs, "max_error": float(max(errs))}


def _resolve(name):
    path = Path(name)
    if path.is_file():
        return path
    bundled = scenario_path(name)
    if bundled is not None:
        return bundled
    raise ScenarioError(f"scenario {name!r} not found (not a file or bundled scenario)")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="vilin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vilin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file or bundled scenario name")
    run.add_argument("scenario")
    run.add_argument("--strict", action="store_true", help="unknown keys are errors")
    run.add_argument("--out", help="output directory (default: ./<scenario>-out)")
    run.add_argument("--threads", type=int, default=1, help="linearization worker threads")
    run.add_argument("--verify", action="store_true",
                     help="check linearizations against finite differences")
    sub.add_parser("list", help="list bundled scenarios")
    args = parser.parse_args(argv)
    if args.command == "list":
        from ..scenarios import bundled

        for name in bundled():
            print(name)
        return EXIT_OK
    try:
        if args.threads < 1:
            raise ScenarioError("--threads must be at least 1")
        sc = load_scenario(_resolve(args.scenario), strict=args.strict)
        for w in sc.warnings:
            print(f"warning: {w}", file=sys.stderr)
        out = Path(args.out) if args.out else Path(f"{sc.name}-out")
        code = run_scenario(sc, out, args.threads, args.verify)
        if code == EXIT_NONCONVERGED:
            print("error: optimizer did not converge (bundle written)", file=sys.stderr)
        return code
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SingularityError as exc:
        at = f" at step {exc.step_index}" if exc.step_index is not None else ""
        print(f"singularity fault{at}: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except (StepError, EvaluationError) as exc:
        at = f" at step {exc.step_index}" if exc.step_index is not None else ""
        print(f"step fault{at}: {exc}", file=sys.stderr)
        return EXIT_STEP


if __name__ == "__main__":
    sys.exit(main())
