"""Loss gradients with respect to the network parameters.

Three routes are provided:

* ``gradient_discrete``: exact adjoint of the backward-Euler scheme. For
  step k with system matrix (or converged Newton Jacobian) S_k the adjoint
  recursion is ``S_k^T p_k = dL/dx_k + (M/tau) p_{k+1}`` and
  ``dL/dtheta = -sum_k p_k^T (dS_k/dtheta) x_k``.
* ``gradient_continuous``: discretization of the continuous adjoint PDE,
  marched backward from lambda(T) = 0 with the forward operator itself, then
  a rectangle rule in time. Consistent only to O(tau); linear model only.
* ``gradient_fd``: central finite differences, for testing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..errors import SolverError, TrainingError
from ..fem.stepping import DualCoefficients, DualTrajectory
from ..linalg import Factorized
from ..neural import kappa_net_vjp, mlp_vjp
from .data import TrustedData, loss_parts
from .problem import CorrectionProblem

log = logging.getLogger(__name__)

GRAD_MODES = ("discrete", "continuous", "fd")


@dataclass
class Gradient:
    loss: float
    kappa: np.ndarray
    sigma: np.ndarray
    trajectory: Optional[DualTrajectory] = None

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.kappa, self.sigma])


def _loss_weight(data: TrustedData, M) -> float:
    if not data.mask.any():
        raise TrainingError("trusted data has no observed entries")
    _, den = loss_parts(data.values, data, M)
    total = den.sum()
    if not total > 0:
        raise TrainingError("loss normalizer is zero: observed reference values vanish")
    return 100.0 / total


def _residual_sensitivity(u1: np.ndarray, data: TrustedData, M, k: int, weight: float) -> np.ndarray:
    """d(loss)/d(u1 at step k), full nodal vector."""
    m = data.mask[k - 1].astype(float)
    err = m * (u1 - data.values[k - 1])
    return 2.0 * weight * m * (M @ err)


def _chain_to_params(problem: CorrectionProblem, knet, snet, d_kappa, d_sigma):
    """Pull nodal coefficient cotangents back through the networks."""
    pts = problem.inputs
    d_kappa = d_kappa.reshape(-1, 2, 2)
    d_sigma = d_sigma.reshape(-1, 1)
    return kappa_net_vjp(knet, pts, d_kappa), mlp_vjp(snet, pts, d_sigma)


def _loss_of(traj, data, M, weight) -> float:
    num, _ = loss_parts(traj.u1[1:], data, M)
    return float(weight * num.sum())


def gradient_discrete(problem: CorrectionProblem, data: TrustedData,
                      theta: Optional[np.ndarray] = None,
                      traj: Optional[DualTrajectory] = None) -> Gradient:
    """Exact gradient of the discrete loss, linear or nonlinear model."""
    theta = problem.theta if theta is None else theta
    knet, snet = problem.split(theta)
    coeffs = problem.coefficients(theta)
    solver = problem.solver
    if traj is None:
        traj = solver.solve(coeffs)
    M = solver.M
    weight = _loss_weight(data, M)
    idx = solver.interior
    m = idx.size
    n = problem.grid.node_count
    n_steps = problem.n_steps
    asm = solver.asm
    m_tau = solver.M_in / problem.tau

    steps_shape = (n_steps,) if problem.time_inputs else ()
    d_kappa = np.zeros(steps_shape + (n, 2, 2))
    d_sigma = np.zeros(steps_shape + (n,))
    p_next = np.zeros(2 * m)
    system = None
    reuse = problem.beta == 0.0 and not coeffs.time_dependent
    for k in range(n_steps, 0, -1):
        a2, sigma = solver.step_matrices(coeffs, k) if (system is None or not reuse) else (None, None)
        if problem.beta == 0.0:
            if system is None or not reuse:
                system = Factorized(solver.block_system(solver.A1, a2, sigma), problem.linear_solver)
        else:
            system = Factorized(solver.jacobian(traj.u1[k], a2, sigma), problem.linear_solver)
        rhs = np.concatenate([m_tau @ p_next[:m], m_tau @ p_next[m:]])
        rhs[:m] += _residual_sensitivity(traj.u1[k], data, M, k, weight)[idx]
        try:
            p = system.solve(rhs, transpose=True)
        except SolverError as exc:
            raise SolverError(f"adjoint solve failed ({exc.args[0]})", step=k) from exc
        p1, p2 = np.zeros(n), np.zeros(n)
        p1[idx], p2[idx] = p[:m], p[m:]
        u1, u2 = traj.u1[k], traj.u2[k]
        slot = (k - 1,) if problem.time_inputs else ()
        d_kappa[slot] -= asm.stiffness_vjp_nodal(p2, u2)
        d_sigma[slot] -= (p1 - p2) * (M @ (u1 - u2))
        p_next = p
    gk, gs = _chain_to_params(problem, knet, snet, d_kappa, d_sigma)
    return Gradient(_loss_of(traj, data, M, weight), gk, gs, traj)


def adjoint_solve_continuous(problem: CorrectionProblem, traj: DualTrajectory, data: TrustedData,
                             coeffs: DualCoefficients) -> DualTrajectory:
    """Backward-Euler march of the continuous adjoint system from lambda(T) = 0.

    ``(M/tau + S) lam_k = (M/tau) lam_{k+1} - c M (m (u1_k - U_k))`` for
    k = N-1 .. 1, where S is the spatial part of the forward operator and
    ``c = 2 W / tau`` turns the per-step loss weight W into a time density.
    """
    if problem.beta != 0.0 or coeffs.time_dependent:
        raise ValueError("the continuous adjoint is implemented for the linear model only")
    solver = problem.solver
    M = solver.M
    weight = _loss_weight(data, M)
    idx = solver.interior
    m = idx.size
    n = problem.grid.node_count
    a2, sigma = solver.step_matrices(coeffs, 1)
    system = Factorized(solver.block_system(solver.A1, a2, sigma), problem.linear_solver)
    m_tau = solver.M_in / problem.tau
    lam1 = np.zeros((problem.n_steps + 1, n))
    lam2 = np.zeros((problem.n_steps + 1, n))
    for k in range(problem.n_steps - 1, 0, -1):
        src = _residual_sensitivity(traj.u1[k], data, M, k, weight) / problem.tau
        rhs = np.concatenate([m_tau @ lam1[k + 1, idx] - src[idx], m_tau @ lam2[k + 1, idx]])
        try:
            sol = system.solve(rhs)
        except SolverError as exc:
            raise SolverError(f"adjoint solve failed ({exc.args[0]})", step=k) from exc
        lam1[k, idx], lam2[k, idx] = sol[:m], sol[m:]
    return DualTrajectory(problem.grid, problem.tau, lam1, lam2)


def gradient_continuous(problem: CorrectionProblem, data: TrustedData,
                        theta: Optional[np.ndarray] = None,
                        traj: Optional[DualTrajectory] = None) -> Gradient:
    """Optimize-then-discretize gradient: tau * sum_k lam_k^T (dS/dtheta) u_k."""
    theta = problem.theta if theta is None else theta
    knet, snet = problem.split(theta)
    coeffs = problem.coefficients(theta)
    solver = problem.solver
    if traj is None:
        traj = solver.solve(coeffs)
    lam = adjoint_solve_continuous(problem, traj, data, coeffs)
    M = solver.M
    tau = problem.tau
    steps = slice(1, problem.n_steps + 1)
    d_kappa = tau * solver.asm.stiffness_vjp_nodal(lam.u2[steps], traj.u2[steps])
    diff = traj.u1[steps] - traj.u2[steps]
    d_sigma = tau * np.sum((lam.u1[steps] - lam.u2[steps]) * (M @ diff.T).T, axis=0)
    gk, gs = _chain_to_params(problem, knet, snet, d_kappa, d_sigma)
    return Gradient(_loss_of(traj, data, M, _loss_weight(data, M)), gk, gs, traj)


# central stencils: offsets (in units of the step) and weights
_STENCILS = {2: ((1, -1), (0.5, -0.5)),
             4: ((2, 1, -1, -2), (-1 / 12, 2 / 3, -2 / 3, 1 / 12))}


def gradient_fd(loss: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-6,
                order: int = 2) -> np.ndarray:
    """Central finite differences of ``loss`` at ``theta``, componentwise.

    ``order=4`` uses the five-point stencil, which tolerates a larger step and
    so keeps rounding noise out of small components.
    """
    if order not in _STENCILS:
        raise ValueError(f"unsupported stencil order {order}")
    offsets, weights = _STENCILS[order]
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        acc = 0.0
        for off, w in zip(offsets, weights):
            e = np.zeros_like(theta)
            e[i] = off * step
            val = loss(theta + e)
            if not np.isfinite(val):
                raise TrainingError(f"non-finite loss in finite differences at component {i}")
            acc += w * val
        grad[i] = acc / step
    return grad


def problem_loss(problem: CorrectionProblem, data: TrustedData) -> Callable[[np.ndarray], float]:
    def loss(theta):
        traj = problem.solver.solve(problem.coefficients(theta))
        return _loss_of(traj, data, problem.M, _loss_weight(data, problem.M))
    return loss


def gradient_fd_problem(problem: CorrectionProblem, data: TrustedData,
                        theta: Optional[np.ndarray] = None, step: float = 1e-6,
                        order: int = 2) -> Gradient:
    theta = problem.theta if theta is None else theta
    g = gradient_fd(problem_loss(problem, data), theta, step, order)
    return Gradient(problem_loss(problem, data)(theta), g[:problem.n_kappa], g[problem.n_kappa:])


def compute_gradient(problem: CorrectionProblem, data: TrustedData, mode: str = "discrete",
                     theta: Optional[np.ndarray] = None) -> Gradient:
    if mode == "discrete":
        return gradient_discrete(problem, data, theta)
    if mode == "continuous":
        return gradient_continuous(problem, data, theta)
    if mode == "fd":
        return gradient_fd_problem(problem, data, theta)
    raise ValueError(f"unknown gradient mode {mode!r}; expected one of {GRAD_MODES}")


def relative_errors(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Componentwise |a - e| / |e| over components with |e| > floor."""
    keep = np.abs(exact) > floor
    return np.abs(approx[keep] - exact[keep]) / np.abs(exact[keep])
