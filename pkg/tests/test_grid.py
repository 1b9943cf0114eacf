import numpy as np
import pytest

from mucor.grid import build_grid, cells_to_nodes, refine


def test_build_grid_paper_mesh():
    g = build_grid(10, 10)
    assert g.hx == pytest.approx(0.1)
    assert g.node_count == 121
    assert g.cell_count == 100


def test_single_cell_grid_has_no_interior():
    g = build_grid(1, 1)
    assert g.node_count == 4
    assert len(g.boundary_nodes) == 4
    assert len(g.interior_nodes) == 0


def test_three_by_two_counts():
    # nodes (i, j), i = 0..3, j = 0..2: interior are (1,1) and (2,1)
    g = build_grid(3, 2)
    assert g.node_count == 12
    assert len(g.boundary_nodes) == 10
    assert list(g.interior_nodes) == [g.node_id(1, 1), g.node_id(2, 1)] == [5, 6]


@pytest.mark.parametrize("nx, ny", [(0, 3), (3, 0), (-1, 2)])
def test_rejects_non_positive_counts(nx, ny):
    with pytest.raises(ValueError):
        build_grid(nx, ny)


def test_node_coordinates_exact():
    g = build_grid(7, 3)
    for j in range(4):
        for i in range(8):
            x, y = g.node_coords[g.node_id(i, j)]
            assert x == i * (1.0 / 7) and y == j * (1.0 / 3)


def test_boundary_interior_partition():
    g = build_grid(5, 4)
    both = np.concatenate([g.boundary_nodes, g.interior_nodes])
    assert sorted(both) == list(range(g.node_count))
    x, y = g.node_coords[g.boundary_nodes].T
    assert np.all((x == 0) | (x == 1) | (y == 0) | (y == 1))


def test_refine_counts_and_blocks():
    fine = refine(build_grid(10, 10), 10)
    assert (fine.nx, fine.ny) == (100, 100)
    counts = np.bincount(fine.block_of_cell, minlength=100)
    assert np.all(counts == 100)
    assert fine.block_cells.shape == (100, 100)


def test_refine_identity():
    g = build_grid(4, 3)
    f = refine(g, 1)
    assert (f.nx, f.ny) == (4, 3)
    assert np.array_equal(f.block_of_cell, np.arange(g.cell_count))
    assert np.array_equal(f.node_coords, g.node_coords)


def test_refine_block_lookup():
    fine = refine(build_grid(2, 2), 3)
    assert (fine.nx, fine.ny) == (6, 6)
    # fine cell (4, 4) sits in coarse cell (1, 1), id 3
    assert fine.block_of_cell[fine.cell_id(4, 4)] == 3


def test_block_cells_partition():
    fine = refine(build_grid(3, 2), 4)
    cells = np.sort(fine.block_cells.ravel())
    assert np.array_equal(cells, np.arange(fine.cell_count))
    for b, members in enumerate(fine.block_cells):
        assert np.all(fine.block_of_cell[members] == b)


@pytest.mark.parametrize("r", [0, -2])
def test_refine_rejects_bad_factor(r):
    with pytest.raises(ValueError):
        refine(build_grid(2, 2), r)


def test_cells_to_nodes_kernel():
    g = build_grid(2, 2)
    vals = np.array([1.0, 2.0, 3.0, 4.0])
    nodal = cells_to_nodes(vals, g)
    assert nodal[g.node_id(1, 1)] == pytest.approx(2.5)
    assert nodal[g.node_id(0, 0)] == 1.0
    assert nodal[g.node_id(2, 2)] == 4.0
    assert nodal[g.node_id(1, 0)] == pytest.approx(1.5)
    assert np.allclose(cells_to_nodes(np.full(4, 7.0), g), 7.0)
