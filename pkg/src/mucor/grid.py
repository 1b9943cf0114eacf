"""Uniform rectangular grids on the unit square.

Nodes are numbered row-major with ``y`` as the outer index, so node ``(i, j)``
has id ``j * (nx + 1) + i``. Cells follow the same convention with id
``j * nx + i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class StructuredGrid:
    nx: int
    ny: int
    parent: Optional["StructuredGrid"] = None
    factor: int = 1

    def __post_init__(self):
        for name in ("nx", "ny", "factor"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def node_shape(self) -> tuple[int, int]:
        """(rows, cols) of the nodal array, i.e. (ny + 1, nx + 1)."""
        return (self.ny + 1, self.nx + 1)

    @property
    def cell_shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def node_count(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def cell_count(self) -> int:
        return self.nx * self.ny

    def node_id(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i

    def cell_id(self, i: int, j: int) -> int:
        return j * self.nx + i

    @cached_property
    def node_coords(self) -> np.ndarray:
        """(node_count, 2) array of node coordinates, computed as (i*hx, j*hy)."""
        j, i = np.divmod(np.arange(self.node_count), self.nx + 1)
        return np.column_stack([i * self.hx, j * self.hy])

    @cached_property
    def cell_centers(self) -> np.ndarray:
        j, i = np.divmod(np.arange(self.cell_count), self.nx)
        return np.column_stack([(i + 0.5) * self.hx, (j + 0.5) * self.hy])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """(cell_count, 4) node ids per cell, counter-clockwise from lower-left."""
        j, i = np.divmod(np.arange(self.cell_count), self.nx)
        n0 = j * (self.nx + 1) + i
        return np.column_stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1])

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        j, i = np.divmod(np.arange(self.node_count), self.nx + 1)
        return (i == 0) | (i == self.nx) | (j == 0) | (j == self.ny)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def block_of_cell(self) -> np.ndarray:
        """Parent-grid cell id for every cell (identity when unrefined)."""
        j, i = np.divmod(np.arange(self.cell_count), self.nx)
        r = self.factor
        return (j // r) * (self.nx // r) + (i // r)

    @cached_property
    def block_cells(self) -> np.ndarray:
        """(parent cell_count, factor**2) fine-cell ids of every block, row-major inside a block."""
        order = np.argsort(self.block_of_cell, kind="stable")
        return order.reshape(-1, self.factor * self.factor)

    @property
    def coarse(self) -> "StructuredGrid":
        return self.parent if self.parent is not None else self

    def __repr__(self) -> str:
        extra = f", factor={self.factor}" if self.parent is not None else ""
        return f"StructuredGrid(nx={self.nx}, ny={self.ny}{extra})"


def build_grid(nx: int, ny: int) -> StructuredGrid:
    return StructuredGrid(nx, ny)


def refine(grid: StructuredGrid, factor: int) -> StructuredGrid:
    """Split every cell of ``grid`` into ``factor x factor`` cells."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"refinement factor must be a positive integer, got {factor!r}")
    return StructuredGrid(grid.nx * factor, grid.ny * factor, parent=grid, factor=int(factor))


def same_shape(a: StructuredGrid, b: StructuredGrid) -> bool:
    return a.nx == b.nx and a.ny == b.ny


def cells_to_nodes(values: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    """Average cell values onto nodes with a 2x2 kernel of weight 1/4.

    Edge and corner nodes average only the cells that exist (2 or 1), so
    constants are reproduced everywhere. Trailing axes of ``values`` are kept.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.cell_count:
        raise ValueError(f"expected {grid.cell_count} cell values, got {values.shape[0]}")
    total = np.zeros((grid.node_count,) + values.shape[1:])
    count = np.zeros(grid.node_count)
    for a in range(4):
        np.add.at(total, grid.cell_nodes[:, a], values)
        np.add.at(count, grid.cell_nodes[:, a], 1.0)
    return total / count.reshape((-1,) + (1,) * (values.ndim - 1))
