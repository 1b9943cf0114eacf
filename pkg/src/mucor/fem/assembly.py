"""Q1 (bilinear) finite element assembly on uniform rectangular grids.

Coefficients are handled at the 2x2 Gauss points of every element. Nodal
tensors are interpolated bilinearly to those points, cell fields are taken as
constant per element.
"""
from __future__ import annotations

from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from ..grid import StructuredGrid

_SX = np.array([-1.0, 1.0, 1.0, -1.0])
_SY = np.array([-1.0, -1.0, 1.0, 1.0])
_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def gauss_points(order: int = 2):
    """Tensor Gauss-Legendre points and weights on [-1, 1]^2."""
    if order == 2:
        pts, wts = _GAUSS, np.ones(2)
    else:
        pts, wts = np.polynomial.legendre.leggauss(order)
    xi, eta = np.meshgrid(pts, pts, indexing="xy")
    w = np.outer(wts, wts)
    return xi.ravel(), eta.ravel(), w.ravel()


class Q1Element:
    """Shape functions and their physical gradients at the quadrature points."""

    def __init__(self, hx: float, hy: float, order: int = 2):
        xi, eta, w = gauss_points(order)
        self.hx, self.hy = hx, hy
        self.xi, self.eta = xi, eta
        # (nq, 4)
        self.N = 0.25 * (1 + np.outer(xi, _SX)) * (1 + np.outer(eta, _SY))
        dndx = 0.25 * _SX[None, :] * (1 + np.outer(eta, _SY)) * (2.0 / hx)
        dndy = 0.25 * _SY[None, :] * (1 + np.outer(xi, _SX)) * (2.0 / hy)
        # (nq, 4, 2)
        self.G = np.stack([dndx, dndy], axis=-1)
        self.w = w * (hx * hy / 4.0)

    @property
    def nq(self) -> int:
        return self.w.size


class Assembler:
    """Sparse assembly on a fixed element-to-dof map.

    ``cell_nodes`` may contain wrapped (periodic) dof ids; the sparsity
    structure is computed once and reused for every assembly.
    """

    def __init__(self, cell_nodes: np.ndarray, n_dofs: int, hx: float, hy: float,
                 cell_origin: Optional[np.ndarray] = None):
        self.cell_nodes = np.asarray(cell_nodes, dtype=np.int64)
        self.n_dofs = int(n_dofs)
        self.element = Q1Element(hx, hy)
        self.cell_origin = cell_origin
        rows = np.repeat(self.cell_nodes, 4, axis=1).ravel()
        cols = np.tile(self.cell_nodes, (1, 4)).ravel()
        keys = rows * self.n_dofs + cols
        uniq, self._pos = np.unique(keys, return_inverse=True)
        self._indices = (uniq % self.n_dofs).astype(np.int32)
        counts = np.bincount(uniq // self.n_dofs, minlength=self.n_dofs)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

    @classmethod
    def for_grid(cls, grid: StructuredGrid) -> "Assembler":
        origin = grid.node_coords[grid.cell_nodes[:, 0]]
        return cls(grid.cell_nodes, grid.node_count, grid.hx, grid.hy, cell_origin=origin)

    @property
    def n_cells(self) -> int:
        return self.cell_nodes.shape[0]

    def _build(self, element_matrices: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._pos, weights=element_matrices.ravel(), minlength=self._indices.size)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_dofs, self.n_dofs))

    # --- interpolation to quadrature points -------------------------------

    def nodal_to_qp(self, values: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of nodal values (n, ...) to (ne, nq, ...)."""
        local = values[self.cell_nodes]  # (ne, 4, ...)
        return np.tensordot(self.element.N, local, axes=([1], [1])).swapaxes(0, 1)

    def grad_qp(self, u: np.ndarray) -> np.ndarray:
        """Gradient of the nodal field ``u`` at the quadrature points, (..., ne, nq, 2)."""
        local = u[..., self.cell_nodes]  # (..., ne, 4)
        return np.einsum("...ea,qad->...eqd", local, self.element.G)

    @cached_property
    def qp_coords(self) -> np.ndarray:
        el = self.element
        offs = np.column_stack([(el.xi + 1) * el.hx / 2, (el.eta + 1) * el.hy / 2])
        return self.cell_origin[:, None, :] + offs[None, :, :]

    # --- matrices ----------------------------------------------------------

    def mass(self, weight_qp: Optional[np.ndarray] = None) -> sp.csr_matrix:
        el = self.element
        if weight_qp is None:
            me = np.einsum("q,qa,qb->ab", el.w, el.N, el.N)
            mats = np.broadcast_to(me, (self.n_cells, 4, 4))
        else:
            mats = np.einsum("eq,q,qa,qb->eab", weight_qp, el.w, el.N, el.N)
        return self._build(np.ascontiguousarray(mats))

    def stiffness_qp(self, kappa_qp: np.ndarray) -> sp.csr_matrix:
        """Stiffness matrix for a tensor coefficient given at quadrature points (ne, nq, 2, 2)."""
        el = self.element
        mats = np.einsum("q,qai,eqij,qbj->eab", el.w, el.G, kappa_qp, el.G, optimize=True)
        return self._build(mats)

    def stiffness_nodal(self, kappa_nodes: np.ndarray) -> sp.csr_matrix:
        return self.stiffness_qp(self.nodal_to_qp(kappa_nodes))

    def stiffness_cells(self, kappa_cells: np.ndarray) -> sp.csr_matrix:
        """Stiffness for a scalar per-cell coefficient, exact for piecewise constants."""
        ref = self.reference_laplacian
        mats = np.asarray(kappa_cells, dtype=float)[:, None, None] * ref[None]
        return self._build(mats)

    def stiffness_linearization(self, kappa_qp: np.ndarray, dscale_qp: np.ndarray,
                                u: np.ndarray) -> sp.csr_matrix:
        """Extra Jacobian term of ``u -> A(kappa * s(u)) u``; ``dscale_qp`` holds s'(u) at the qp."""
        el = self.element
        flux = np.einsum("eqij,eqj->eqi", kappa_qp, self.grad_qp(u)) * dscale_qp[..., None]
        mats = np.einsum("q,qai,eqi,qb->eab", el.w, el.G, flux, el.N, optimize=True)
        return self._build(mats)

    @cached_property
    def reference_laplacian(self) -> np.ndarray:
        el = self.element
        return np.einsum("q,qai,qbi->ab", el.w, el.G, el.G)

    def stiffness_vjp_nodal(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_s left[s]^T A(kappa) right[s]`` w.r.t. nodal tensors.

        ``left``/``right`` have shape (n,) or (steps, n); returns (n, 2, 2).
        """
        el = self.element
        gl = self.grad_qp(np.atleast_2d(left))
        gr = self.grad_qp(np.atleast_2d(right))
        outer = np.einsum("seqi,seqj->eqij", gl, gr) * el.w[None, :, None, None]
        per_node = np.einsum("qa,eqij->eaij", el.N, outer)
        out = np.zeros((self.n_dofs, 2, 2))
        np.add.at(out, self.cell_nodes, per_node)
        return out

    def nodal_scatter(self, qp_values: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`nodal_to_qp` for scalar qp data (ne, nq) -> (n,)."""
        per_node = qp_values @ self.element.N  # (ne, 4)
        return np.bincount(self.cell_nodes.ravel(), weights=per_node.ravel(), minlength=self.n_dofs)

    def load(self, f: Callable[[np.ndarray, np.ndarray], np.ndarray], subdiv: int = 4) -> np.ndarray:
        """Load vector ``int f psi_i`` by composite 2x2 Gauss over ``subdiv**2`` sub-cells."""
        el = self.element
        xi, eta, w = gauss_points(2)
        s = (np.arange(subdiv) + 0.5) / subdiv * 2 - 1
        sx, sy = np.meshgrid(s, s, indexing="xy")
        lx = (sx.ravel()[:, None] + xi[None, :] / subdiv).ravel()
        ly = (sy.ravel()[:, None] + eta[None, :] / subdiv).ravel()
        lw = np.tile(w, subdiv * subdiv) / subdiv**2 * (el.hx * el.hy / 4.0)
        N = 0.25 * (1 + np.outer(lx, _SX)) * (1 + np.outer(ly, _SY))
        x = self.cell_origin[:, 0:1] + (lx[None, :] + 1) * el.hx / 2
        y = self.cell_origin[:, 1:2] + (ly[None, :] + 1) * el.hy / 2
        fv = np.asarray(f(x, y), dtype=float) * np.ones_like(x)
        local = (fv * lw[None, :]) @ N
        return np.bincount(self.cell_nodes.ravel(), weights=local.ravel(), minlength=self.n_dofs)


def assemble_mass(grid: StructuredGrid) -> sp.csr_matrix:
    return Assembler.for_grid(grid).mass()


def assemble_stiffness(grid: StructuredGrid, tensor_coeff: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix for nodal 2x2 tensors, shape (node_count, 2, 2)."""
    tensor_coeff = np.asarray(tensor_coeff, dtype=float)
    if tensor_coeff.shape != (grid.node_count, 2, 2):
        raise ValueError(f"expected nodal tensors of shape {(grid.node_count, 2, 2)}, got {tensor_coeff.shape}")
    check_spd(tensor_coeff)
    return Assembler.for_grid(grid).stiffness_nodal(tensor_coeff)


def check_spd(tensors: np.ndarray, what: str = "coefficient") -> None:
    t = np.asarray(tensors)
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{what} contains non-finite entries")
    a, b, c, d = t[..., 0, 0], t[..., 0, 1], t[..., 1, 0], t[..., 1, 1]
    if not np.allclose(b, c, rtol=1e-12, atol=0.0):
        raise ValueError(f"{what} is not symmetric")
    bad = (a <= 0) | (d <= 0) | (a * d - b * c <= 0)
    if np.any(bad):
        raise ValueError(f"{what} is not positive definite at {int(bad.sum())} point(s)")


def diag_tensors(d11: np.ndarray, d22: np.ndarray) -> np.ndarray:
    d11 = np.asarray(d11, dtype=float)
    out = np.zeros(d11.shape + (2, 2))
    out[..., 0, 0] = d11
    out[..., 1, 1] = d22
    return out


def iso_tensors(values: np.ndarray) -> np.ndarray:
    return diag_tensors(values, values)


def tensors_from_entries(entries: np.ndarray) -> np.ndarray:
    """(n, 3) rows (k11, k12, k22) -> (n, 2, 2)."""
    e = np.asarray(entries, dtype=float)
    out = np.empty(e.shape[:-1] + (2, 2))
    out[..., 0, 0] = e[..., 0]
    out[..., 0, 1] = out[..., 1, 0] = e[..., 1]
    out[..., 1, 1] = e[..., 2]
    return out


def entries_from_tensors(tensors: np.ndarray) -> np.ndarray:
    t = np.asarray(tensors, dtype=float)
    return np.stack([t[..., 0, 0], 0.5 * (t[..., 0, 1] + t[..., 1, 0]), t[..., 1, 1]], axis=-1)
