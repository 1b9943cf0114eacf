import numpy as np
import pytest

from mucor.errors import GridMismatchError, HomogenizationError
from mucor.fields import ScalarCellField
from mucor.grid import build_grid, refine
from mucor.homogenize import (arithmetic_mean, block_tensor, effective_tensor, harmonic_mean,
                              interpolate_to_nodes, solve_cell_problem, upscale)


def test_constant_block():
    t = block_tensor(np.full((8, 8), 3.5))
    assert np.allclose(t, 3.5 * np.eye(2), atol=1e-12)


def test_vertical_layers_bounds():
    block = np.tile([1.0, 100.0], (8, 4))
    t = block_tensor(block)
    assert t[0, 0] == pytest.approx(200 / 101, rel=1e-8)
    assert t[1, 1] == pytest.approx(50.5, rel=1e-8)
    assert abs(t[0, 1]) < 1e-10


def test_layers_primal_estimator():
    block = np.repeat([[1.0], [100.0]], 4, axis=0).repeat(8, axis=1)
    t = block_tensor(block, estimator="primal")
    assert t[1, 1] == pytest.approx(200 / 101, rel=1e-8)
    assert t[0, 0] == pytest.approx(50.5, rel=1e-8)


def test_estimator_between_means(rng):
    block = np.exp(rng.standard_normal((12, 12)))
    t = block_tensor(block)
    for i in range(2):
        assert harmonic_mean(block) - 1e-10 <= t[i, i] <= arithmetic_mean(block) + 1e-10
    assert np.all(np.linalg.eigvalsh(t) > 0)
    assert np.allclose(t, t.T)


def test_primal_upper_bound(rng):
    block = np.exp(2 * rng.standard_normal((10, 10)))
    upper = block_tensor(block, estimator="primal")
    t = block_tensor(block)
    assert np.all(np.linalg.eigvalsh(upper - t) >= -1e-9)


def test_correctors_zero_mean():
    block = np.tile([1.0, 10.0], (6, 3))
    sol = solve_cell_problem(block)
    assert np.allclose(sol.correctors.mean(axis=1), 0, atol=1e-12)
    assert sol.periodic_nodal(0).shape == (7, 7)
    assert effective_tensor(block, sol).shape == (2, 2)


def test_invalid_blocks():
    with pytest.raises(HomogenizationError):
        block_tensor(np.array([[1.0, -1.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        block_tensor(np.ones((4, 4)), estimator="magic")
    with pytest.raises(ValueError):
        solve_cell_problem(np.ones(4))


def test_upscale_field_shapes():
    coarse = build_grid(3, 2)
    fine = refine(coarse, 4)
    field = ScalarCellField(fine, np.full(fine.cell_count, 2.0))
    tensors = upscale(field, coarse)
    assert tensors.entries.shape == (6, 3)
    assert np.allclose(tensors.entries, [2.0, 0.0, 2.0], atol=1e-12)
    nodal = interpolate_to_nodes(tensors)
    assert nodal.values.shape == (coarse.node_count, 2, 2)
    with pytest.raises(GridMismatchError):
        upscale(field, build_grid(5, 5))
