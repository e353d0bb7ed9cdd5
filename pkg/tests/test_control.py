"""Time-varying LQR, adjoint gradient and trajectory optimization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.linalg import solve_discrete_are
from sklearn.base import clone

from vilin.control import (CostWeights, LqrProblem, cost_gradient, default_weights,
                           lqr_problem, optimize_trajectory, rollout_closed_loop, solve_lqr,
                           step_reference, tracking_cost)
from vilin.estimators import LQRTracker, TrajectoryOptimizer
from vilin.integrator import simulate
from vilin.model import discretize
from vilin.systems import pendulum


@pytest.fixture(scope="module")
def pend():
    return discretize(pendulum(), 0.1)


def _batch_lqr(A, B, Q, R, x0):
    """Optimal open-loop inputs of the finite-horizon LQ problem by one linear solve."""
    N, nx, m = B.shape
    # x = Sx x0 + Su U
    Sx = np.zeros(((N + 1) * nx, nx))
    Su = np.zeros(((N + 1) * nx, N * m))
    Sx[:nx] = np.eye(nx)
    for k in range(N):
        Sx[(k + 1) * nx:(k + 2) * nx] = A[k] @ Sx[k * nx:(k + 1) * nx]
        Su[(k + 1) * nx:(k + 2) * nx] = A[k] @ Su[k * nx:(k + 1) * nx]
        Su[(k + 1) * nx:(k + 2) * nx, k * m:(k + 1) * m] += B[k]
    Qb = np.zeros(((N + 1) * nx, (N + 1) * nx))
    for k in range(N + 1):
        Qb[k * nx:(k + 1) * nx, k * nx:(k + 1) * nx] = Q[k]
    Rb = np.kron(np.eye(N), R[0])
    H = Su.T @ Qb @ Su + Rb
    U = -np.linalg.solve(H, Su.T @ Qb @ Sx @ x0)
    x = Sx @ x0 + Su @ U
    return U.reshape(N, m), x @ Qb @ x + U @ Rb @ U


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_riccati_matches_batch_solution(N, seed):
    rng = np.random.default_rng(seed)
    nx, m = 3, 2
    A = rng.normal(size=(N, nx, nx))
    B = rng.normal(size=(N, nx, m))
    G = rng.normal(size=(nx, nx))
    Q = np.stack([G @ G.T] * (N + 1))
    R = np.stack([np.eye(m) * 0.5] * N)
    sol = solve_lqr(LqrProblem(A, B, Q, R))
    x0 = rng.normal(size=nx)
    U, J = _batch_lqr(A, B, Q, R, x0)
    # first optimal input is the feedback law at k = 0, optimal cost is x0' P0 x0
    assert_allclose(-sol.K[0] @ x0, U[0], rtol=1e-7, atol=1e-8)
    assert x0 @ sol.P[0] @ x0 == pytest.approx(J, rel=1e-8)
    assert_allclose(sol.P, np.transpose(sol.P, (0, 2, 1)), atol=1e-10)


def test_riccati_converges_to_dare():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    Q, R = np.diag([10.0, 1.0]), np.array([[0.1]])
    N = 2000
    sol = solve_lqr(LqrProblem(np.stack([A] * N), np.stack([B] * N), Q, R))
    P = solve_discrete_are(A, B, Q, R)
    assert_allclose(sol.P[0], P, rtol=1e-8)
    assert_allclose(sol.K[0], np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A), rtol=1e-8)


def test_lqr_problem_validation():
    A = np.stack([np.eye(2)] * 3)
    B = np.ones((3, 2, 1))
    with pytest.raises(ValueError, match="positive definite"):
        LqrProblem(A, B, np.eye(2), np.zeros((1, 1)))
    with pytest.raises(ValueError, match="symmetric"):
        LqrProblem(A, B, np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(1))
    with pytest.raises(ValueError, match="semidefinite"):
        LqrProblem(A, B, -np.eye(2), np.eye(1))
    with pytest.raises(ValueError, match="needs 4"):
        LqrProblem(A, B, np.stack([np.eye(2)] * 3), np.eye(1))
    with pytest.raises(ValueError):
        CostWeights(np.eye(2), np.zeros((1, 1)))


def test_closed_loop_with_zero_gains_is_open_loop(pend):
    ref = simulate(pend, [0.3, 0.0], np.full((20, 1), 0.2))
    x0 = np.array([0.5, 0.1])
    cl = rollout_closed_loop(pend, x0, ref, np.zeros((20, 1, 2)))
    ol = simulate(pend, x0, ref.inputs)
    assert_allclose(cl.x, ol.x, atol=1e-14)


def test_lqr_reduces_tracking_error(pend):
    ref = simulate(pend, [0.3, 0.0], np.full((60, 1), 0.2))
    sol = solve_lqr(lqr_problem(pend, ref))
    x0 = ref.states[0].x + np.array([0.2, -0.1])
    cl = rollout_closed_loop(pend, x0, ref, sol)
    err = np.linalg.norm(cl.x - ref.x, axis=1)
    assert err[-1] < 1e-3 * err[0]


def test_adjoint_gradient_vs_finite_differences(pend):
    ref = step_reference(N=30, dt=0.1, target=1.0)
    rng = np.random.default_rng(0)
    U = rng.normal(scale=0.5, size=30)
    J, g = cost_gradient(pend, ref, U)
    assert J == pytest.approx(tracking_cost(pend, ref, U), rel=1e-14)
    h = 1e-6
    fd = np.array([(tracking_cost(pend, ref, U + h * e) - tracking_cost(pend, ref, U - h * e))
                   / (2 * h) for e in np.eye(30)])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-5


@pytest.fixture(scope="module")
def short_runs(pend):
    ref = step_reference(N=30, dt=0.1, target=1.0)
    return ref, {m: optimize_trajectory(pend, ref, method=m) for m in ("second", "first")}


def test_optimizer_converges_and_cost_decreases(short_runs):
    _, runs = short_runs
    for method, (traj, log) in runs.items():
        assert log.converged, method
        assert log.iterations[-1]["descent_norm"] <= 1e-6
        costs = log.costs
        assert np.all(np.diff(costs) <= 1e-12 * np.abs(costs[:-1])), method
        assert all(it["step_size"] > 0 for it in log.iterations[:-1])


def test_optimizer_methods_agree_and_second_is_faster(short_runs):
    _, runs = short_runs
    (t2, l2), (t1, l1) = runs["second"], runs["first"]
    assert_allclose(t1.x, t2.x, atol=1e-4)
    assert l2.n_iter < l1.n_iter


def test_optimized_trajectory_is_del_feasible(pend, short_runs):
    ref, runs = short_runs
    traj, _ = runs["second"]
    again = simulate(pend, ref.states[0], traj.inputs)
    assert_allclose(again.x, traj.x, atol=1e-10)


def test_feasible_reference_needs_no_iterations(pend):
    ref = simulate(pend, [0.3, 0.0], np.full((15, 1), 0.4))
    traj, log = optimize_trajectory(pend, ref, method="second")
    assert log.converged
    assert log.n_iter == 0
    assert len(log.iterations) == 1
    assert log.iterations[0]["cost"] == pytest.approx(0.0, abs=1e-20)


def test_optimizer_rejects_unknown_method(pend):
    with pytest.raises(ValueError):
        optimize_trajectory(pend, step_reference(N=4), method="third")


def test_log_as_dict(short_runs):
    _, runs = short_runs
    d = runs["second"][1].as_dict()
    assert d["method"] == "second" and d["converged"] is True
    assert set(d["iterations"][0]) == {"cost", "descent_norm", "step_size"}


def test_step_reference_shape():
    ref = step_reference(N=10, dt=0.2, target=[1.0, 2.0], inputs=2)
    assert ref.q.shape == (11, 2)
    assert_allclose(ref.q[4], 0.0)
    assert_allclose(ref.q[5], [1.0, 2.0])
    assert ref.inputs.shape == (10, 2)


def test_default_weights():
    w = default_weights(2, 1)
    assert_allclose(np.diag(w.Q), [100, 100, 1, 1])
    assert_allclose(w.Qf, w.Q)


# estimator wrappers

def test_lqr_tracker_estimator(pend):
    ref = simulate(pend, [0.3, 0.0], np.full((40, 1), 0.2))
    est = LQRTracker(pend, config_weight=50.0)
    assert est.get_params()["config_weight"] == 50.0
    est2 = clone(est).set_params(config_weight=10.0)
    assert est2.config_weight == 10.0 and est.config_weight == 50.0
    est.fit(ref)
    assert est.gains_.shape == (40, 1, 2)
    x0 = ref.states[0].x + np.array([0.1, 0.0])
    assert est.predict(x0).N == 40
    open_err = np.linalg.norm(simulate(pend, x0, ref.inputs).x[-1] - ref.x[-1])
    assert -est.score(x0) < 0.1 * open_err


def test_trajectory_optimizer_estimator(pend):
    ref = step_reference(N=20, dt=0.1, target=0.5)
    est = TrajectoryOptimizer(pend, method="second").fit(ref)
    assert est.converged_
    assert est.transform().shape == (21, 2)
    direct, log = optimize_trajectory(pend, ref, method="second")
    assert_allclose(est.trajectory_.x, direct.x)
    assert est.n_iter_ == log.n_iter
    with pytest.raises(ValueError):
        TrajectoryOptimizer().fit(ref)
