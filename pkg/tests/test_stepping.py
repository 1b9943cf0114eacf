import numpy as np
import pytest

from mucor.errors import SolverError
from mucor.fem.assembly import Assembler, assemble_mass, assemble_stiffness, iso_tensors
from mucor.fem.reference import solve_fine_reference
from mucor.fem.stepping import (DualCoefficients, DualSolver, solve_dual_linear,
                                solve_dual_nonlinear, step_dual_linear)
from mucor.grid import build_grid


def _coeffs(g, sigma=1.0, beta=0.0, k2=2.0, source=1.0):
    n = g.node_count
    f = Assembler.for_grid(g).load(lambda x, y: source)
    return DualCoefficients(iso_tensors(np.ones(n)), iso_tensors(np.full(n, k2)),
                            np.full(n, sigma), f, None, beta)


def test_zero_transfer_decouples():
    g = build_grid(6, 6)
    c = _coeffs(g, sigma=0.0)
    traj = solve_dual_linear(c, g, 0.05, 4)
    single = solve_fine_reference(np.ones(g.cell_count), 0.0, c.source, g, 0.05, 4)
    assert np.allclose(traj.u1, single, atol=1e-14)
    assert np.all(traj.u2 == 0)


def test_large_transfer_equalizes():
    g = build_grid(6, 6)
    traj = solve_dual_linear(_coeffs(g, sigma=1e8), g, 0.05, 3)
    assert np.abs(traj.u1[-1] - traj.u2[-1]).max() < 1e-6 * np.abs(traj.u1[-1]).max()


def test_single_step_matches_block_formula():
    g = build_grid(4, 4)
    M = assemble_mass(g)
    A1 = assemble_stiffness(g, iso_tensors(np.ones(g.node_count)))
    A2 = assemble_stiffness(g, iso_tensors(np.full(g.node_count, 2.0)))
    F = Assembler.for_grid(g).load(lambda x, y: 1.0)
    u1, u2 = step_dual_linear(np.zeros(g.node_count), np.zeros(g.node_count), M, A1, A2, 0.1, F,
                              np.full(g.node_count, 3.0), g)
    idx = g.interior_nodes
    Mi = M.toarray()[np.ix_(idx, idx)]
    S = np.block([[Mi / 0.1 + A1.toarray()[np.ix_(idx, idx)] + 3 * Mi, -3 * Mi],
                  [-3 * Mi, Mi / 0.1 + A2.toarray()[np.ix_(idx, idx)] + 3 * Mi]])
    sol = np.linalg.solve(S, np.concatenate([F[idx], np.zeros(idx.size)]))
    assert np.allclose(u1[idx], sol[:idx.size], rtol=1e-12)
    assert np.allclose(u2[idx], sol[idx.size:], rtol=1e-12)
    assert np.all(u1[g.boundary_nodes] == 0)


def test_zero_steps_and_shapes():
    g = build_grid(3, 3)
    traj = solve_dual_linear(_coeffs(g), g, 0.1, 0)
    assert traj.u1.shape == (1, g.node_count)
    traj = solve_dual_linear(_coeffs(g), g, 0.1, 5)
    assert traj.n_steps == 5 and traj.final_time == pytest.approx(0.5)


def test_time_dependent_coefficients():
    g = build_grid(4, 4)
    c = _coeffs(g)
    c_t = DualCoefficients(c.kappa1, np.stack([c.kappa2] * 3), np.stack([c.sigma] * 3),
                           c.source)
    assert c_t.time_dependent
    a = solve_dual_linear(c, g, 0.1, 3)
    b = solve_dual_linear(c_t, g, 0.1, 3)
    assert np.allclose(a.u1, b.u1, rtol=1e-13)


def test_newton_beta_zero_equals_linear():
    g = build_grid(8, 8)
    c = _coeffs(g, source=50.0)
    lin = solve_dual_linear(c, g, 0.01, 5)
    newton = solve_dual_nonlinear(c, g, 0.01, 5)
    assert np.abs(lin.u1 - newton.u1).max() < 1e-12
    assert all(it <= 1 for it in newton.newton_iterations)


def test_newton_quadratic_convergence():
    g = build_grid(8, 8)
    c = _coeffs(g, beta=0.5, source=50.0)
    traj = solve_dual_nonlinear(c, g, 0.01, 3)
    for hist in traj.residual_history:
        assert hist[-1] <= 1e-10
        assert len(hist) <= 6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_newton_failure_reports_step():
    g = build_grid(6, 6)
    c = _coeffs(g, beta=5.0, source=1e4)
    solver = DualSolver(g, 1.0, 2, c.kappa1, c.beta, newton_max_iter=1)
    with pytest.raises(SolverError) as info:
        solver.solve(c)
    assert info.value.step == 1
    assert info.value.history


def test_linear_entry_rejects_beta():
    g = build_grid(3, 3)
    with pytest.raises(ValueError):
        solve_dual_linear(_coeffs(g, beta=0.1), g, 0.1, 1)


def test_bicgstab_matches_direct():
    g = build_grid(8, 8)
    c = _coeffs(g)
    a = solve_dual_linear(c, g, 0.05, 3)
    b = solve_dual_linear(c, g, 0.05, 3, linear_solver="bicgstab")
    assert np.allclose(a.u1, b.u1, rtol=1e-7, atol=1e-12)
