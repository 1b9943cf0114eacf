"""Flow-based upscaling by local periodic cell problems.

For every coarse block the fine permeability is treated as one period of a
periodic medium. The correctors solve, in weak form on the unit cell,

    int k grad(N_j) . grad(v) = -int k dv/dy_j      for all periodic v,

with zero mean, and the effective tensor is the cell average of
``k (delta_ij + dN_j/dy_i)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import GridMismatchError, HomogenizationError, SolverError
from .fem.assembly import Assembler, tensors_from_entries
from .fields import NodalField, ScalarCellField, TensorCellField
from .grid import StructuredGrid, cells_to_nodes
from .linalg import projected_cg

log = logging.getLogger(__name__)

CELL_RTOL = 1e-10


@dataclass
class CellProblemSolution:
    """Zero-mean periodic correctors on an ``n x n`` block subgrid.

    ``correctors[j]`` holds the ``n * n`` unique nodal values of N_{j+1}
    (row-major); the periodic images on the right/top edges are implied.
    """

    block: int
    shape: tuple
    correctors: np.ndarray
    iterations: tuple = (0, 0)

    def periodic_nodal(self, j: int) -> np.ndarray:
        """Corrector ``j`` on the full (ny+1) x (nx+1) node array with periodic images."""
        ny, nx = self.shape
        vals = self.correctors[j].reshape(ny, nx)
        return np.pad(vals, ((0, 1), (0, 1)), mode="wrap")


@lru_cache(maxsize=16)
def _periodic_assembler(ny: int, nx: int) -> Assembler:
    j, i = np.divmod(np.arange(nx * ny), nx)

    def dof(ii, jj):
        return (jj % ny) * nx + (ii % nx)

    cell_nodes = np.column_stack([dof(i, j), dof(i + 1, j), dof(i + 1, j + 1), dof(i, j + 1)])
    return Assembler(cell_nodes, nx * ny, 1.0 / nx, 1.0 / ny)


def _as_block(block_kappa) -> np.ndarray:
    if isinstance(block_kappa, ScalarCellField):
        return block_kappa.values.reshape(block_kappa.grid.cell_shape)
    arr = np.asarray(block_kappa, dtype=float)
    if arr.ndim != 2:
        raise ValueError("block permeability must be a 2-D (ny, nx) array")
    return arr


def solve_cell_problem(block_kappa, block: int = 0, rtol: float = CELL_RTOL) -> CellProblemSolution:
    """Periodic correctors for one block given as a (ny, nx) cell array or ScalarCellField."""
    kappa = _as_block(block_kappa)
    ny, nx = kappa.shape
    if nx < 2 or ny < 2:
        raise ValueError("cell problem needs at least 2x2 fine cells per block")
    if not np.all(kappa > 0) or not np.all(np.isfinite(kappa)):
        raise HomogenizationError("permeability must be positive and finite", block)
    k = kappa.reshape(-1)
    if np.all(k == k[0]):
        return CellProblemSolution(block, (ny, nx), np.zeros((2, nx * ny)))
    asm = _periodic_assembler(ny, nx)
    stiff = asm.stiffness_cells(k)
    el = asm.element
    correctors = np.zeros((2, nx * ny))
    iters = []
    for j in range(2):
        local = -k[:, None] * np.einsum("q,qa->a", el.w, el.G[:, :, j])[None, :]
        rhs = np.bincount(asm.cell_nodes.ravel(), weights=local.ravel(), minlength=asm.n_dofs)
        try:
            correctors[j], it = projected_cg(stiff, rhs, rtol=rtol)
        except SolverError as exc:
            raise HomogenizationError(f"cell problem solver failed ({exc})", block) from exc
        iters.append(it)
    return CellProblemSolution(block, (ny, nx), correctors, tuple(iters))


def effective_tensor(block_kappa, solution: CellProblemSolution) -> np.ndarray:
    """2x2 effective tensor of one block from its correctors."""
    kappa = _as_block(block_kappa)
    ny, nx = kappa.shape
    if solution.shape != (ny, nx):
        raise GridMismatchError("correctors were computed on a different block grid")
    k = kappa.reshape(-1)
    asm = _periodic_assembler(ny, nx)
    el = asm.element
    area = float(el.w.sum()) * k.size
    # grad N_j at the quadrature points: (2, ne, nq, 2)
    grads = asm.grad_qp(solution.correctors)
    tensor = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            integrand = (1.0 if i == j else 0.0) + grads[j, :, :, i]
            tensor[i, j] = np.sum(k[:, None] * integrand * el.w[None, :]) / area
    tensor = 0.5 * (tensor + tensor.T)
    if not (tensor[0, 0] > 0 and tensor[1, 1] > 0 and np.linalg.det(tensor) > 0):
        raise HomogenizationError(f"effective tensor is not SPD: {tensor.tolist()}", solution.block)
    return tensor


_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])

ESTIMATORS = ("primal-dual", "primal")


def dual_tensor(block_kappa, block: int = 0) -> np.ndarray:
    """Lower estimate of the effective tensor from the reciprocal medium.

    In two dimensions divergence-free fluxes are rotated gradients, so
    ``K(k) = R K(1/k)^-1 R^T``; evaluating ``K(1/k)`` with the (upper-bound)
    primal discretization turns it into a lower bound for ``K(k)``.
    """
    kappa = _as_block(block_kappa)
    recip = effective_tensor(1.0 / kappa, solve_cell_problem(1.0 / kappa, block))
    out = _ROT @ np.linalg.inv(recip) @ _ROT.T
    return 0.5 * (out + out.T)


def geometric_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix geometric mean ``a # b = a^1/2 (a^-1/2 b a^-1/2)^1/2 a^1/2`` of SPD matrices."""
    def sqrtm(m):
        w, v = np.linalg.eigh(m)
        return (v * np.sqrt(w)) @ v.T

    ah = sqrtm(a)
    ahi = np.linalg.inv(ah)
    out = ah @ sqrtm(ahi @ b @ ahi) @ ah
    return 0.5 * (out + out.T)


def block_tensor(block_kappa, block: int = 0, estimator: str = "primal-dual") -> np.ndarray:
    """Effective tensor of one block.

    ``"primal"`` is the corrector formula alone, an upper bound that converges
    slowly near high-contrast corners; ``"primal-dual"`` combines it with
    :func:`dual_tensor` through the matrix geometric mean. Both agree exactly
    on mesh-aligned layered blocks.
    """
    if estimator not in ("primal", "primal-dual"):
        raise ValueError(f"unknown estimator {estimator!r}")
    kappa = _as_block(block_kappa)
    if kappa.shape == (1, 1) or np.all(kappa == kappa.flat[0]):
        if not kappa.flat[0] > 0:
            raise HomogenizationError("permeability must be positive", block)
        return float(kappa.flat[0]) * np.eye(2)
    upper = effective_tensor(kappa, solve_cell_problem(kappa, block))
    if estimator == "primal":
        return upper
    return geometric_mean(upper, dual_tensor(kappa, block))


def upscale(fine_kappa: ScalarCellField, coarse: StructuredGrid,
            estimator: str = "primal-dual") -> TensorCellField:
    """Effective tensor of every coarse block; blocks are solved independently."""
    fine = fine_kappa.grid
    if fine.nx % coarse.nx or fine.ny % coarse.ny or fine.nx // coarse.nx != fine.ny // coarse.ny:
        raise GridMismatchError(f"{fine} does not refine {coarse} uniformly")
    r = fine.nx // coarse.nx
    vals = fine_kappa.values.reshape(fine.ny, fine.nx)
    entries = np.empty((coarse.cell_count, 3))
    for b in range(coarse.cell_count):
        bj, bi = divmod(b, coarse.nx)
        block = vals[bj * r:(bj + 1) * r, bi * r:(bi + 1) * r]
        t = block_tensor(block, b, estimator)
        entries[b] = (t[0, 0], t[0, 1], t[1, 1])
    return TensorCellField(coarse, entries)


def interpolate_to_nodes(tensor_field: TensorCellField) -> NodalField:
    """Nodal 2x2 tensors from the 2x2 averaging kernel; values shaped (n, 2, 2)."""
    nodal = cells_to_nodes(tensor_field.entries, tensor_field.grid)
    return NodalField(tensor_field.grid, tensors_from_entries(nodal))


def arithmetic_mean(block) -> float:
    return float(np.mean(block))


def harmonic_mean(block) -> float:
    b = np.asarray(block, dtype=float)
    return float(b.size / np.sum(1.0 / b))
