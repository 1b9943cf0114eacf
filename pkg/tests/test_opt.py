import numpy as np
import pytest

from mucor.errors import GridMismatchError, TrainingError
from mucor.fem.assembly import assemble_mass
from mucor.grid import build_grid
from mucor.opt.data import (TrustedData, evaluate, read_error_table, relative_l2_loss,
                            sample_trusted_data, write_error_table)
from mucor.opt.gradients import (compute_gradient, gradient_continuous, gradient_discrete,
                                 gradient_fd, gradient_fd_problem, relative_errors)
from mucor.opt.toy import KINK_MARGIN, kink_margin, toy_instance
from mucor.opt.training import (TrainingConfig, read_loss_history, smoothed_monotone_fraction,
                                train, write_loss_history)


def _data(g, n_steps=3, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.random((n_steps, g.node_count)) + 0.1
    return TrustedData(g, 0.1, values)


# --- data and loss ------------------------------------------------------------


def test_loss_zero_at_reference():
    g = build_grid(4, 4)
    data = _data(g)
    assert relative_l2_loss(data.values, data, assemble_mass(g)) == 0.0


def test_loss_scaling():
    g = build_grid(4, 4)
    data = _data(g)
    M = assemble_mass(g)
    # u = 1.1 U gives a squared relative error of 1%
    assert relative_l2_loss(1.1 * data.values, data, M) == pytest.approx(1.0)
    table = evaluate(1.1 * data.values, data, M)
    assert np.allclose(table[:, 1], 1.0)
    assert np.allclose(table[:, 0], [0.1, 0.2, 0.3])


def test_loss_errors():
    g = build_grid(3, 3)
    M = assemble_mass(g)
    data = _data(g)
    with pytest.raises(TrainingError):
        relative_l2_loss(data.values, data.with_mask(np.zeros_like(data.mask)), M)
    zero = TrustedData(g, 0.1, np.zeros((2, g.node_count)))
    with pytest.raises(TrainingError):
        relative_l2_loss(zero.values, zero, M)
    with pytest.raises(GridMismatchError):
        relative_l2_loss(np.zeros((2, 3)), data, M)
    with pytest.raises(GridMismatchError):
        TrustedData(g, 0.1, np.zeros((2, 5)))


def test_times_are_clean():
    g = build_grid(2, 2)
    data = TrustedData(g, 0.001, np.zeros((10, g.node_count)))
    assert data.times[8] == 0.009
    assert data.times[-1] == 0.01


def test_error_table_roundtrip(tmp_path):
    table = np.array([[0.1, 1.5], [0.2, 1.0 / 3.0]])
    write_error_table(table, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "t,error_percent"
    assert np.array_equal(read_error_table(tmp_path / "e.csv"), table)


def test_sampling_modes():
    g = build_grid(10, 10)
    full = TrustedData(g, 0.1, np.ones((10, g.node_count)))
    s = sample_trusted_data(full, "spatial-ratio", seed=0, ratio=0.6)
    counts = s.mask.sum(axis=1)
    assert np.all(counts == 72)
    assert np.array_equal(s.mask[0], s.mask[-1])
    again = sample_trusted_data(full, "spatial-ratio", seed=0, ratio=0.6)
    assert np.array_equal(again.mask, s.mask)
    p = sample_trusted_data(full, "time-prefix", t_star=0.4)
    assert list(p.observed_steps) == [0, 1, 2, 3]
    assert sample_trusted_data(full, "full").mask.all()
    with pytest.raises(ValueError):
        sample_trusted_data(full, "spatial-ratio", ratio=1.5)
    with pytest.raises(ValueError):
        sample_trusted_data(full, "time-prefix")
    with pytest.raises(ValueError):
        sample_trusted_data(full, "random")
    with pytest.raises(TrainingError):
        sample_trusted_data(full, "time-prefix", t_star=0.05)


# --- gradients ------------------------------------------------------------------


def test_toy_instance_is_kink_free():
    problem, _ = toy_instance(0)
    pts = problem.inputs
    assert kink_margin(problem.kappa_net, pts) > KINK_MARGIN
    assert kink_margin(problem.sigma_net, pts) > KINK_MARGIN


@pytest.mark.parametrize("seed", [0, 1, 3])
def test_discrete_gradient_matches_fd(seed):
    problem, data = toy_instance(seed)
    exact = gradient_discrete(problem, data).flat
    fd = gradient_fd_problem(problem, data, step=1e-3, order=4).flat
    assert relative_errors(exact, fd).max() < 1e-5


def test_discrete_gradient_nonlinear_time_inputs():
    problem, data = toy_instance(0, beta=0.5, time_inputs=True)
    exact = gradient_discrete(problem, data).flat
    fd = gradient_fd_problem(problem, data, step=1e-3, order=4).flat
    assert relative_errors(exact, fd).max() < 1e-5


def test_gradient_with_partial_mask():
    problem, data = toy_instance(1)
    mask = data.mask.copy()
    mask[1] = False
    data = data.with_mask(mask)
    exact = gradient_discrete(problem, data).flat
    fd = gradient_fd_problem(problem, data, step=1e-3, order=4).flat
    assert relative_errors(exact, fd).max() < 1e-5


def test_continuous_gradient_consistent_to_first_order():
    # the continuous adjoint differs from the exact discrete gradient by O(tau)
    gaps = []
    for n_steps in (4, 8, 16):
        problem, data = toy_instance(0, n_steps=n_steps, tau=0.4 / n_steps)
        d = gradient_discrete(problem, data).flat
        c = gradient_continuous(problem, data).flat
        gaps.append(np.linalg.norm(c - d) / np.linalg.norm(d))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[1] / gaps[2] > 1.5
    assert np.dot(c, d) > 0


def test_continuous_rejects_nonlinear():
    problem, data = toy_instance(0, beta=0.5)
    with pytest.raises(ValueError):
        gradient_continuous(problem, data)


def test_fd_helper_and_dispatch():
    g = gradient_fd(lambda t: float(np.sum(t**3)), np.array([1.0, 2.0]), step=1e-3, order=4)
    assert np.allclose(g, [3.0, 12.0], rtol=1e-10)
    with pytest.raises(ValueError):
        gradient_fd(lambda t: 0.0, np.zeros(1), order=3)
    problem, data = toy_instance(2)
    with pytest.raises(ValueError):
        compute_gradient(problem, data, "magic")
    assert compute_gradient(problem, data, "discrete").loss > 0


# --- training -------------------------------------------------------------------


def test_training_decreases_loss(tmp_path):
    problem, data = toy_instance(0)
    cfg = TrainingConfig(epochs=200, lr=1e-2, checkpoint_every=100, log_every=0)
    result = train(cfg, problem, data, checkpoint_dir=tmp_path)
    assert result.history[-1] < result.history[0]
    assert result.checkpoints == ["epoch000100", "epoch000200", "final"]
    assert (tmp_path / "kappa_net_final.bin").exists()
    write_loss_history(result.history, tmp_path / "loss.csv")
    assert np.array_equal(read_loss_history(tmp_path / "loss.csv"), result.history)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        problem, data = toy_instance(1)
        runs.append(train(TrainingConfig(epochs=30, lr=1e-3, log_every=0), problem, data))
    assert np.array_equal(runs[0].theta, runs[1].theta)
    assert np.array_equal(runs[0].history, runs[1].history)


def test_training_recovers_from_failures(monkeypatch):
    import mucor.opt.training as tr

    problem, data = toy_instance(0)
    real = tr.compute_gradient
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise FloatingPointError("injected")
        return real(*args, **kwargs)

    monkeypatch.setattr(tr, "compute_gradient", flaky)
    result = train(TrainingConfig(epochs=6, lr=1e-3, log_every=0), problem, data)
    assert result.failures == 1
    assert np.isnan(result.history[2])
    assert np.isfinite(result.history[[0, 1, 3, 4, 5]]).all()


def test_training_aborts_after_repeated_failures(monkeypatch):
    import mucor.opt.training as tr

    def broken(*args, **kwargs):
        raise FloatingPointError("always")

    monkeypatch.setattr(tr, "compute_gradient", broken)
    problem, data = toy_instance(0)
    with pytest.raises(TrainingError):
        train(TrainingConfig(epochs=20, max_failures=3, log_every=0), problem, data)


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainingConfig(grad_mode="adjoint")
    with pytest.raises(ValueError):
        TrainingConfig(ratio=0.0)
    cfg = TrainingConfig.from_dict({"epochs": 5, "unrelated": 1})
    assert cfg.epochs == 5 and cfg.to_dict()["lr"] == 1e-4
    problem, data = toy_instance(0, beta=0.5)
    with pytest.raises(TrainingError):
        train(TrainingConfig(epochs=1, grad_mode="continuous"), problem, data)


def test_smoothed_monotone_fraction():
    assert smoothed_monotone_fraction(np.linspace(10, 1, 1000)) == 1.0
    noisy = np.linspace(10, 1, 1000) + np.tile([0.5, -0.5], 500)
    assert smoothed_monotone_fraction(noisy) == 1.0
    assert smoothed_monotone_fraction(np.linspace(1, 10, 1000)) == 0.0
    with pytest.raises(ValueError):
        smoothed_monotone_fraction(np.ones(150))
