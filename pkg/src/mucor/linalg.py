"""Sparse linear solvers used by the time steppers and cell problems."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError

RTOL = 1e-10


class Factorized:
    """A matrix prepared for repeated solves with itself and its transpose.

    ``method="direct"`` uses a sparse LU factorization, ``"bicgstab"`` runs
    Jacobi-preconditioned BiCGStab per right-hand side.
    """

    def __init__(self, matrix: sp.spmatrix, method: str = "direct", rtol: float = RTOL,
                 maxiter: int | None = None):
        self.matrix = sp.csc_matrix(matrix)
        self.method = method
        self.rtol = rtol
        n = self.matrix.shape[0]
        self.maxiter = maxiter if maxiter is not None else 10 * n
        if method == "direct":
            try:
                self._lu = spla.splu(self.matrix)
                self._norm = spla.norm(self.matrix, 1)
            except RuntimeError as exc:
                raise SolverError(f"sparse LU failed: {exc}") from exc
        elif method == "bicgstab":
            diag = self.matrix.diagonal()
            if np.any(diag == 0):
                raise SolverError("zero diagonal entry, Jacobi preconditioner undefined")
            self._dinv = 1.0 / diag
        else:
            raise ValueError(f"unknown linear solver {method!r}")

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if not np.any(rhs):
            return np.zeros_like(rhs)
        if self.method == "direct":
            x = self._lu.solve(rhs, trans="T" if transpose else "N")
            mat = self.matrix.T if transpose else self.matrix
            res = np.linalg.norm(mat @ x - rhs)
            scale = self._norm * np.linalg.norm(x) + np.linalg.norm(rhs)
            if not np.isfinite(res) or res > self.rtol * scale:
                raise SolverError("direct solve inaccurate", residual=res / scale)
            return x
        mat = self.matrix.T.tocsr() if transpose else self.matrix.tocsr()
        return bicgstab(mat, rhs, self._dinv, self.rtol, self.maxiter)


def bicgstab(matrix, rhs, dinv, rtol=RTOL, maxiter=1000):
    n = rhs.shape[0]
    precond = spla.LinearOperator((n, n), matvec=lambda v: dinv * v, dtype=float)
    x, info = spla.bicgstab(matrix, rhs, rtol=rtol, atol=0.0, maxiter=maxiter, M=precond)
    res = np.linalg.norm(matrix @ x - rhs)
    if info != 0 or res > 10 * rtol * np.linalg.norm(rhs):
        raise SolverError("BiCGStab did not converge", iterations=maxiter if info > 0 else info,
                          residual=res / np.linalg.norm(rhs))
    return x


def projected_cg(matrix, rhs, rtol=RTOL, maxiter=None):
    """Jacobi-preconditioned CG for a singular SPD system whose kernel is the constants.

    The constant mode is projected out of the residual and the iterate at every
    iteration, so the result has zero (arithmetic) mean.
    """
    n = rhs.shape[0]
    maxiter = maxiter if maxiter is not None else 10 * n

    def project(v):
        return v - v.mean()

    b = project(np.asarray(rhs, dtype=float))
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, 0
    dinv = 1.0 / matrix.diagonal()
    r = b.copy()
    z = project(dinv * r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        ap = matrix @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        r = project(r)
        if np.linalg.norm(r) <= rtol * bnorm:
            x = project(x)
            true_res = np.linalg.norm(project(matrix @ x) - b)
            if true_res <= 10 * rtol * bnorm:
                return x, it
        z = project(dinv * r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError("projected CG did not converge", iterations=maxiter,
                      residual=np.linalg.norm(r) / bnorm)
