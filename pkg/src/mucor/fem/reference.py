"""Fine-scale reference solutions and their coarse-block averages."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..errors import GridMismatchError, SolverError
from ..grid import StructuredGrid, cells_to_nodes
from ..linalg import Factorized
from .assembly import Assembler
from .stepping import NEWTON_MAX_ITER, NEWTON_TOL


def solve_fine_reference(fine_kappa: np.ndarray, beta: float, source: np.ndarray,
                         fine_grid: StructuredGrid, tau: float, n_steps: int,
                         newton_tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                         linear_solver: str = "direct") -> np.ndarray:
    """Backward-Euler FEM for ``u_t - div(k0 exp(beta u) grad u) = f`` on the fine grid.

    ``fine_kappa`` is the per-cell permeability, ``source`` a load vector
    (n,) or per step (N, n). Returns nodal values at t_0 .. t_N, shape (N+1, n).
    """
    kappa = np.asarray(fine_kappa, dtype=float).reshape(-1)
    if kappa.size != fine_grid.cell_count:
        raise GridMismatchError("permeability does not match the fine grid")
    asm = Assembler.for_grid(fine_grid)
    idx = fine_grid.interior_nodes
    n = fine_grid.node_count
    m_in = sp.csr_matrix(asm.mass())[idx][:, idx]
    m_tau = m_in / tau
    source = np.asarray(source, dtype=float)
    u = np.zeros((n_steps + 1, n))

    def load(k):
        return (source[k - 1] if source.ndim == 2 else source)[idx]

    if beta == 0.0:
        a_in = sp.csr_matrix(asm.stiffness_cells(kappa))[idx][:, idx]
        system = Factorized(m_tau + a_in, linear_solver)
        for k in range(1, n_steps + 1):
            u[k, idx] = system.solve(m_tau @ u[k - 1, idx] + load(k))
        return u

    kappa_qp = np.broadcast_to(kappa[:, None, None, None] * np.eye(2), (kappa.size, 4, 2, 2))
    for k in range(1, n_steps + 1):
        cur = u[k - 1].copy()
        history = []
        for it in range(max_iter + 1):
            scale = np.exp(beta * asm.nodal_to_qp(cur))
            a = asm.stiffness_qp(kappa_qp * scale[..., None, None])
            r = m_tau @ (cur[idx] - u[k - 1, idx]) + (a @ cur)[idx] - load(k)
            res = float(np.linalg.norm(r))
            history.append(res)
            if res <= newton_tol:
                break
            if it == max_iter or not np.isfinite(res):
                raise SolverError("fine-scale Newton did not converge", iterations=it,
                                  residual=res, step=k, history=history)
            jac = a + asm.stiffness_linearization(kappa_qp, beta * scale, cur)
            delta = Factorized(m_tau + sp.csr_matrix(jac)[idx][:, idx], linear_solver).solve(-r)
            cur[idx] += delta
        u[k] = cur
    return u


def block_average(fine_values: np.ndarray, fine_grid: StructuredGrid) -> np.ndarray:
    """Exact block means of a bilinear fine nodal field, one value per coarse cell.

    Works on a single snapshot (n,) or a stack (..., n).
    """
    if fine_grid.parent is None:
        raise GridMismatchError("fine grid has no parent coarse grid")
    vals = np.asarray(fine_values, dtype=float)
    if vals.shape[-1] != fine_grid.node_count:
        raise GridMismatchError("snapshot does not match the fine grid")
    cell_means = vals[..., fine_grid.cell_nodes].mean(axis=-1)
    return cell_means[..., fine_grid.block_cells].mean(axis=-1)


def coarse_average(fine_values: np.ndarray, fine_grid: StructuredGrid,
                   zero_boundary: bool = True) -> np.ndarray:
    """Block means sampled at coarse nodes with the 2x2 averaging kernel.

    Boundary nodes are set to zero by default, matching the Dirichlet data of
    the coarse model.
    """
    coarse = fine_grid.parent
    blocks = block_average(fine_values, fine_grid)
    lead = blocks.shape[:-1]
    flat = blocks.reshape(-1, coarse.cell_count).T
    nodal = cells_to_nodes(flat, coarse).T.reshape(lead + (coarse.node_count,))
    if zero_boundary:
        nodal[..., coarse.boundary_nodes] = 0.0
    return nodal
