"""scikit-learn style wrappers around LQR tracking and trajectory optimization.

Only the parameter handling of :class:`sklearn.base.BaseEstimator` is used:
``fit`` takes a reference :class:`~vilin.integrator.Trajectory` rather than a
feature matrix, and ``predict`` maps initial states to trajectories.
"""

import numpy as np
from sklearn.base import BaseEstimator

from .control import (CostWeights, default_weights, lqr_problem, optimize_trajectory,
                      rollout_closed_loop, solve_lqr)


def _weights(disc, Q, R, Qf, config_weight):
    base = default_weights(disc.n, disc.m, config_weight)
    Q = base.Q if Q is None else Q
    return CostWeights(Q, base.R if R is None else R, Q if Qf is None else Qf)


class LQRTracker(BaseEstimator):
    """Time-varying LQR tracking of a feasible reference trajectory.

    ``fit(reference)`` linearizes along the reference and solves the
    Riccati recursion; ``predict(x0)`` simulates the nonlinear closed loop.
    """

    def __init__(self, discretization=None, Q=None, R=None, Qf=None, config_weight=100.0,
                 threads=1):
        self.discretization = discretization
        self.Q = Q
        self.R = R
        self.Qf = Qf
        self.config_weight = config_weight
        self.threads = threads

    def fit(self, reference, y=None):
        disc = self.discretization
        if disc is None:
            raise ValueError("LQRTracker needs a discretization")
        self.weights_ = _weights(disc, self.Q, self.R, self.Qf, self.config_weight)
        self.problem_ = lqr_problem(disc, reference, self.weights_, self.threads)
        self.solution_ = solve_lqr(self.problem_)
        self.reference_ = reference
        self.gains_ = self.solution_.K
        self.riccati_ = self.solution_.P
        return self

    def predict(self, x0):
        """Closed-loop trajectory from ``x0`` (state vector or DiscreteState)."""
        return rollout_closed_loop(self.discretization, x0, self.reference_, self.solution_)

    def score(self, x0, y=None):
        """Negative terminal tracking error of the closed loop from ``x0``."""
        traj = self.predict(x0)
        return -float(np.linalg.norm(traj.x[-1] - self.reference_.x[-1]))


class TrajectoryOptimizer(BaseEstimator):
    """Tracking-cost trajectory optimization (see :func:`optimize_trajectory`).

    ``fit(reference)`` stores the optimized trajectory in ``trajectory_``,
    the per-iteration record in ``log_`` and the iteration count in
    ``n_iter_``. ``transform`` returns the optimized state matrix.
    """

    def __init__(self, discretization=None, method="second", tol=1e-6, max_iters=1000,
                 Q=None, R=None, Qf=None, config_weight=100.0, threads=1):
        self.discretization = discretization
        self.method = method
        self.tol = tol
        self.max_iters = max_iters
        self.Q = Q
        self.R = R
        self.Qf = Qf
        self.config_weight = config_weight
        self.threads = threads

    def fit(self, reference, y=None, u0=None):
        disc = self.discretization
        if disc is None:
            raise ValueError("TrajectoryOptimizer needs a discretization")
        self.weights_ = _weights(disc, self.Q, self.R, self.Qf, self.config_weight)
        self.trajectory_, self.log_ = optimize_trajectory(
            disc, reference, self.weights_, method=self.method, tol=self.tol,
            max_iters=self.max_iters, u0=u0, threads=self.threads)
        self.n_iter_ = self.log_.n_iter
        self.converged_ = self.log_.converged
        self.inputs_ = self.trajectory_.inputs
        return self

    def transform(self, reference=None):
        return self.trajectory_.x

    def fit_transform(self, reference, y=None, **fit_params):
        return self.fit(reference, y, **fit_params).transform()

