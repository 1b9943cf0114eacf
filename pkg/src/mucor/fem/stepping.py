"""Backward-Euler time stepping of the coupled two-continuum system.

Per step (interior nodes only, zero Dirichlet data)::

    (M/tau + A1 + D M) u1 - D M u2 = M u1_old / tau + F
    (M/tau + A2 + D M) u2 - D M u1 = M u2_old / tau + F2

with ``D = diag(sigma)``. In the nonlinear model ``A1`` is assembled from
``kappa1(x) * exp(beta * u1)`` and every step is solved by Newton iteration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..errors import SolverError
from ..grid import StructuredGrid
from ..linalg import Factorized
from .assembly import Assembler

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 20


@dataclass
class DualCoefficients:
    """Coefficients of the dual-continuum model on a coarse grid.

    Time-dependent entries carry a leading step axis of length ``n_steps``
    (values at t_1 .. t_N); time-independent ones omit it.
    """

    kappa1: np.ndarray  # (n, 2, 2)
    kappa2: np.ndarray  # (n, 2, 2) or (N, n, 2, 2)
    sigma: np.ndarray  # (n,) or (N, n)
    source: np.ndarray  # (n,) or (N, n) load vectors
    source2: Optional[np.ndarray] = None
    beta: float = 0.0

    @property
    def time_dependent(self) -> bool:
        return self.kappa2.ndim == 4 or self.sigma.ndim == 2

    def kappa2_at(self, k: int) -> np.ndarray:
        return self.kappa2[k - 1] if self.kappa2.ndim == 4 else self.kappa2

    def sigma_at(self, k: int) -> np.ndarray:
        return self.sigma[k - 1] if self.sigma.ndim == 2 else self.sigma

    def source_at(self, k: int) -> np.ndarray:
        return self.source[k - 1] if self.source.ndim == 2 else self.source

    def source2_at(self, k: int) -> Optional[np.ndarray]:
        if self.source2 is None:
            return None
        return self.source2[k - 1] if self.source2.ndim == 2 else self.source2


@dataclass
class DualTrajectory:
    """Nodal values of both continua at t_0 .. t_N (row k is time k * tau)."""

    grid: StructuredGrid
    tau: float
    u1: np.ndarray
    u2: np.ndarray
    newton_iterations: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.u1.shape[0] - 1

    @property
    def final_time(self) -> float:
        return self.n_steps * self.tau

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.tau


class DualSolver:
    """Holds the grid operators shared by every solve of one model setup."""

    def __init__(self, grid: StructuredGrid, tau: float, n_steps: int, kappa1: np.ndarray,
                 beta: float = 0.0, linear_solver: str = "direct",
                 newton_tol: float = NEWTON_TOL, newton_max_iter: int = NEWTON_MAX_ITER):
        if tau <= 0 or n_steps < 0:
            raise ValueError("tau must be positive and n_steps non-negative")
        self.grid = grid
        self.tau = float(tau)
        self.n_steps = int(n_steps)
        self.beta = float(beta)
        self.linear_solver = linear_solver
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.asm = Assembler.for_grid(grid)
        self.interior = grid.interior_nodes
        self.M = self.asm.mass()
        self.M_in = self._restrict(self.M)
        self.kappa1 = np.asarray(kappa1, dtype=float)
        self.kappa1_qp = self.asm.nodal_to_qp(self.kappa1)
        self.A1 = self.asm.stiffness_qp(self.kappa1_qp)

    # --- helpers -------------------------------------------------------------

    def _restrict(self, mat: sp.spmatrix) -> sp.csr_matrix:
        idx = self.interior
        return sp.csr_matrix(mat)[idx][:, idx]

    def _full(self, v_in: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.node_count)
        out[self.interior] = v_in
        return out

    def stiffness1(self, u1: np.ndarray) -> sp.csr_matrix:
        """``A1`` at state ``u1`` (state-independent when beta == 0)."""
        if self.beta == 0.0:
            return self.A1
        scale = np.exp(self.beta * self.asm.nodal_to_qp(u1))
        return self.asm.stiffness_qp(self.kappa1_qp * scale[..., None, None])

    def stiffness1_jacobian(self, u1: np.ndarray) -> sp.csr_matrix:
        """d(A1(u1) u1)/du1."""
        if self.beta == 0.0:
            return self.A1
        u_qp = self.asm.nodal_to_qp(u1)
        scale = np.exp(self.beta * u_qp)
        a = self.asm.stiffness_qp(self.kappa1_qp * scale[..., None, None])
        return a + self.asm.stiffness_linearization(self.kappa1_qp, self.beta * scale, u1)

    def block_system(self, a1: sp.spmatrix, a2: sp.spmatrix, sigma: np.ndarray) -> sp.csc_matrix:
        return block_system(self.M_in, self._restrict(a1), self._restrict(a2),
                            np.asarray(sigma)[self.interior], self.tau)

    def step_matrices(self, coeffs: DualCoefficients, k: int):
        a2 = self.asm.stiffness_nodal(coeffs.kappa2_at(k))
        return a2, coeffs.sigma_at(k)

    # --- stepping -------------------------------------------------------------

    def step_linear(self, u1: np.ndarray, u2: np.ndarray, system: Factorized,
                    f: np.ndarray, f2: Optional[np.ndarray] = None):
        idx = self.interior
        rhs1 = self.M_in @ u1[idx] / self.tau + f[idx]
        rhs2 = self.M_in @ u2[idx] / self.tau
        if f2 is not None:
            rhs2 = rhs2 + f2[idx]
        sol = system.solve(np.concatenate([rhs1, rhs2]))
        m = idx.size
        return self._full(sol[:m]), self._full(sol[m:])

    def step_newton(self, u1_old: np.ndarray, u2_old: np.ndarray, a2: sp.spmatrix,
                    sigma: np.ndarray, f: np.ndarray, f2: Optional[np.ndarray] = None,
                    step: Optional[int] = None):
        """One implicit step of the nonlinear model.

        Each iteration solves the linear ``u2`` equation for the current
        ``u1`` and then corrects ``u1`` with the Jacobian of the reduced
        residual (the ``u2`` response to ``du1`` is included, so a linear
        problem converges after one update).
        """
        idx = self.interior
        m = idx.size
        m_tau = self.M_in / self.tau
        dm = sp.diags(np.asarray(sigma)[idx]) @ self.M_in
        s22 = Factorized(m_tau + self._restrict(a2) + dm, self.linear_solver)
        base2 = m_tau @ u2_old[idx]
        if f2 is not None:
            base2 = base2 + f2[idx]
        u1 = u1_old.copy()
        history = []
        for it in range(self.newton_max_iter + 1):
            u2_in = s22.solve(base2 + dm @ u1[idx])
            a1 = self.stiffness1(u1)
            r1 = (m_tau @ (u1[idx] - u1_old[idx]) + (a1 @ u1)[idx]
                  + dm @ (u1[idx] - u2_in) - f[idx])
            res = float(np.linalg.norm(r1))
            history.append(res)
            if not np.isfinite(res):
                break
            if res <= self.newton_tol:
                return u1, self._full(u2_in), it, history
            if it == self.newton_max_iter:
                break
            j11 = m_tau + self._restrict(self.stiffness1_jacobian(u1)) + dm
            jac = sp.bmat([[j11, -dm], [-dm, s22.matrix]], format="csc")
            delta = Factorized(jac, self.linear_solver).solve(np.concatenate([-r1, np.zeros(m)]))
            u1 = u1 + self._full(delta[:m])
        raise SolverError("Newton iteration did not converge", iterations=len(history) - 1,
                          residual=history[-1], step=step, history=history)

    def jacobian(self, u1: np.ndarray, a2: sp.spmatrix, sigma: np.ndarray) -> sp.csc_matrix:
        """Full interior Jacobian of the step residual at a converged state."""
        return self.block_system(self.stiffness1_jacobian(u1), a2, sigma)

    def solve(self, coeffs: DualCoefficients) -> DualTrajectory:
        n = self.grid.node_count
        u1 = np.zeros((self.n_steps + 1, n))
        u2 = np.zeros((self.n_steps + 1, n))
        traj = DualTrajectory(self.grid, self.tau, u1, u2)
        system = None
        for k in range(1, self.n_steps + 1):
            try:
                if self.beta == 0.0:
                    if system is None or coeffs.time_dependent:
                        a2, sigma = self.step_matrices(coeffs, k)
                        system = Factorized(self.block_system(self.A1, a2, sigma), self.linear_solver)
                    u1[k], u2[k] = self.step_linear(u1[k - 1], u2[k - 1], system,
                                                    coeffs.source_at(k), coeffs.source2_at(k))
                else:
                    a2, sigma = self.step_matrices(coeffs, k)
                    u1[k], u2[k], its, hist = self.step_newton(
                        u1[k - 1], u2[k - 1], a2, sigma, coeffs.source_at(k),
                        coeffs.source2_at(k), step=k)
                    traj.newton_iterations.append(its)
                    traj.residual_history.append(hist)
            except SolverError as exc:
                if exc.step is None:
                    exc.step = k
                    exc.args = (f"{exc.args[0]}, step={k}",)
                raise
        return traj


def block_system(m_in, a1_in, a2_in, sigma_in, tau) -> sp.csc_matrix:
    """Interior 2m x 2m matrix [[M/tau + A1 + DM, -DM], [-DM, M/tau + A2 + DM]]."""
    m_tau = m_in / tau
    dm = sp.diags(sigma_in) @ m_in
    return sp.bmat([[m_tau + a1_in + dm, -dm], [-dm, m_tau + a2_in + dm]], format="csc")


def step_dual_linear(u1, u2, M, A1, A2, tau, F, sigma, grid: StructuredGrid, F2=None,
                     linear_solver: str = "direct"):
    """Advance (u1, u2) by one backward-Euler step with fixed matrices.

    All vectors are full nodal arrays; boundary entries of the result are zero.
    """
    idx = grid.interior_nodes

    def restrict(mat):
        return sp.csr_matrix(mat)[idx][:, idx]

    m_in = restrict(M)
    system = Factorized(block_system(m_in, restrict(A1), restrict(A2), np.asarray(sigma)[idx], tau),
                        linear_solver)
    rhs2 = m_in @ np.asarray(u2)[idx] / tau
    if F2 is not None:
        rhs2 = rhs2 + np.asarray(F2)[idx]
    sol = system.solve(np.concatenate([m_in @ np.asarray(u1)[idx] / tau + np.asarray(F)[idx], rhs2]))
    out1, out2 = np.zeros(grid.node_count), np.zeros(grid.node_count)
    out1[idx], out2[idx] = sol[:idx.size], sol[idx.size:]
    return out1, out2


def solve_dual_linear(coeffs: DualCoefficients, grid: StructuredGrid, tau: float, n_steps: int,
                      linear_solver: str = "direct") -> DualTrajectory:
    if coeffs.beta != 0.0:
        raise ValueError("solve_dual_linear requires beta == 0; use solve_dual_nonlinear")
    return DualSolver(grid, tau, n_steps, coeffs.kappa1, 0.0, linear_solver).solve(coeffs)


def solve_dual_nonlinear(coeffs: DualCoefficients, grid: StructuredGrid, tau: float, n_steps: int,
                         newton_tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                         linear_solver: str = "direct") -> DualTrajectory:
    """Newton-Raphson time stepping; runs Newton even when ``beta == 0``."""
    solver = DualSolver(grid, tau, n_steps, coeffs.kappa1, coeffs.beta, linear_solver,
                        newton_tol, max_iter)
    n = grid.node_count
    traj = DualTrajectory(grid, solver.tau, np.zeros((n_steps + 1, n)), np.zeros((n_steps + 1, n)))
    for k in range(1, n_steps + 1):
        a2, sigma = solver.step_matrices(coeffs, k)
        u1, u2, its, hist = solver.step_newton(traj.u1[k - 1], traj.u2[k - 1], a2, sigma,
                                               coeffs.source_at(k), coeffs.source2_at(k), step=k)
        traj.u1[k], traj.u2[k] = u1, u2
        traj.newton_iterations.append(its)
        traj.residual_history.append(hist)
    return traj
