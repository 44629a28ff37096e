"""Symmetric indefinite (Bunch-Kaufman) factorization for KKT saddle-point systems."""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

from .errors import ShapeError, SingularKKTError


class SymmetricFactor:
    """LDL^T factorization of a symmetric matrix via LAPACK ``?sytrf``.

    Factor once and reuse for any number of right-hand sides. ``rcond`` is the
    LAPACK 1-norm reciprocal condition estimate.
    """

    def __init__(self, a, rcond_min=1e-15):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"expected a square matrix, got shape {a.shape}")
        self.n = a.shape[0]
        self._a = a
        if self.n == 0:
            self._lu, self._ipiv, self.rcond = a, np.zeros(0, dtype=np.int32), 1.0
            return
        lu, ipiv, info = lapack.dsytrf(a, lower=1)
        if info < 0:
            raise ValueError(f"dsytrf: illegal argument {-info}")
        if info > 0:
            raise SingularKKTError("matrix is exactly singular (zero pivot in LDL^T)", rcond=0.0)
        anorm = np.linalg.norm(a, 1)
        rcond, info = lapack.dsycon(lu, ipiv, anorm, lower=1)
        self._lu, self._ipiv, self.rcond = lu, ipiv, float(rcond)
        if not np.isfinite(self.rcond) or self.rcond < rcond_min:
            raise SingularKKTError(
                f"matrix is singular to working precision (rcond={self.rcond:.2e})",
                rcond=self.rcond,
            )

    def solve(self, b, refine=1):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ShapeError(f"right-hand side has {b.shape[0]} rows, expected {self.n}")
        if self.n == 0:
            return b.copy()
        x = self._raw_solve(b)
        for _ in range(refine):
            x = x + self._raw_solve(b - self._a @ x)
        return x

    def _raw_solve(self, b):
        x, info = lapack.dsytrs(self._lu, self._ipiv, b, lower=1)
        if info != 0:
            raise ValueError(f"dsytrs failed with info={info}")
        return x
