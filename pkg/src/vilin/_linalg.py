"""LU factorization with determinant and condition diagnostics."""

import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lapack, lu_factor, lu_solve

# above this 1-norm condition estimate a matrix is flagged as near-singular
COND_THRESHOLD = 1e12


class Factor:
    """Dense LU factorization of a square matrix, computed once and reused.

    ``singular`` is true when a pivot is exactly zero or the matrix is not
    finite; ``solve`` then refuses to run.
    """

    def __init__(self, a):
        a = np.asarray(a, dtype=float)
        self.shape = a.shape
        self.finite = bool(np.all(np.isfinite(a)))
        if not self.finite:
            self.lu, self.piv = None, None
            self.det, self.condition, self.singular = np.nan, np.inf, True
            return
        if a.size == 0:
            self.lu, self.piv = a, np.zeros(0, dtype=np.int32)
            self.det, self.condition, self.singular = 1.0, 1.0, False
            return
        anorm = np.abs(a).sum(axis=0).max()
        with warnings.catch_warnings():
            # exact singularity is reported through ``singular``
            warnings.simplefilter("ignore", LinAlgWarning)
            self.lu, self.piv = lu_factor(a, check_finite=False)
        diag = np.diag(self.lu)
        sign = -1.0 if np.count_nonzero(self.piv != np.arange(a.shape[0])) % 2 else 1.0
        self.det = float(sign * np.prod(diag))
        if np.any(diag == 0.0):
            self.condition, self.singular = np.inf, True
            return
        rcond, info = lapack.dgecon(self.lu, anorm, norm="1")
        self.condition = np.inf if rcond == 0.0 else float(1.0 / rcond)
        self.singular = False

    @property
    def flagged(self):
        return self.singular or self.condition > COND_THRESHOLD

    def solve(self, b):
        if self.singular:
            raise np.linalg.LinAlgError("matrix is singular")
        return lu_solve((self.lu, self.piv), b, check_finite=False)

    def solve_t(self, b):
        """Solve with the transposed matrix."""
        if self.singular:
            raise np.linalg.LinAlgError("matrix is singular")
        return lu_solve((self.lu, self.piv), b, trans=1, check_finite=False)
