import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mucor.neural import (AdamState, Mlp, activate, adam_step, kappa_net_eval, kappa_net_vjp,
                          load_checkpoint, mlp_forward, mlp_init, mlp_vjp, save_checkpoint)


def _fd_vjp(net, x, cot, h=1e-6):
    g = np.empty(net.n_params)
    for i in range(net.n_params):
        e = np.zeros(net.n_params)
        e[i] = h
        up = np.sum(mlp_forward(net.with_theta(net.theta + e), x) * cot)
        dn = np.sum(mlp_forward(net.with_theta(net.theta - e), x) * cot)
        g[i] = (up - dn) / (2 * h)
    return g


def test_param_count_and_layout():
    net = mlp_init([2, 100, 100, 100, 100, 100, 2])
    assert net.n_params == 3 * 100 + 4 * 101 * 100 + 101 * 2
    small = Mlp([2, 3, 1], theta=np.arange(13.0))
    (w1, b1), (w2, b2) = small.layers()
    assert w1.shape == (3, 2) and np.array_equal(b1, [6.0, 7.0, 8.0])
    assert w2.shape == (1, 3) and b2[0] == 12.0


def test_init_deterministic_and_bounded():
    a, b = mlp_init([2, 50, 1], seed=3), mlp_init([2, 50, 1], seed=3)
    assert np.array_equal(a.theta, b.theta)
    (w1, b1), _ = a.layers()
    assert np.all(np.abs(w1) <= 1 / np.sqrt(2)) and np.all(b1 == 0)
    assert not np.array_equal(a.theta, mlp_init([2, 50, 1], seed=4).theta)


def test_activations():
    assert activate("leaky-relu", np.array(-1.0), 0.2) == pytest.approx(-0.2)
    assert activate("leaky-relu", np.array(2.0), 0.2) == 2.0
    assert activate("abs", np.array(-3.0), 0.2) == 3.0
    assert activate("tanh", np.array(0.0), 0.2) == 0.0


def test_forward_shapes_and_zero_weights():
    net = Mlp([2, 4, 3])
    x = np.random.default_rng(0).random((7, 2))
    assert mlp_forward(net, x).shape == (7, 3)
    zero = net.with_theta(np.zeros(net.n_params))
    assert np.all(mlp_forward(zero, x) == 0)


def test_abs_output_nonnegative():
    net = mlp_init([2, 8, 2], "tanh", "abs", seed=1)
    x = np.random.default_rng(2).standard_normal((50, 2))
    assert np.all(mlp_forward(net, x) >= 0)


@pytest.mark.parametrize("hidden, output", [("tanh", "identity"), ("leaky-relu", "identity"),
                                            ("tanh", "abs"), ("identity", "identity")])
def test_vjp_matches_finite_differences(hidden, output):
    rng = np.random.default_rng(5)
    net = mlp_init([3, 6, 5, 2], hidden, output, seed=7)
    net = net.with_theta(net.theta + 0.3 * rng.standard_normal(net.n_params))
    x = rng.random((9, 3))
    cot = rng.standard_normal((9, 2))
    g = mlp_vjp(net, x, cot)
    assert np.allclose(g, _fd_vjp(net, x, cot), rtol=1e-6, atol=1e-8)


def test_input_validation():
    net = mlp_init([2, 3, 1])
    with pytest.raises(ValueError):
        mlp_forward(net, np.ones((4, 3)))
    with pytest.raises(ValueError):
        mlp_forward(net, np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        mlp_vjp(net, np.ones((4, 2)), np.ones((4, 2)))
    with pytest.raises(ValueError):
        Mlp([2, 3, 1], hidden="relu6")
    with pytest.raises(ValueError):
        Mlp([2, 3, 1], theta=np.ones(3))


def test_kappa_net_floor_and_vjp():
    net = mlp_init([2, 4, 2], "tanh", "abs", seed=0)
    zero = net.with_theta(np.zeros(net.n_params))
    with pytest.warns(RuntimeWarning):
        t = kappa_net_eval(zero, np.ones((3, 2)))
    assert np.all(t[:, 0, 0] == 1e-8) and np.all(t[:, 0, 1] == 0)
    rng = np.random.default_rng(0)
    net = net.with_theta(net.theta + 0.5 * rng.standard_normal(net.n_params))
    pts = rng.random((6, 2))
    cot = rng.standard_normal((6, 2, 2))
    g = kappa_net_vjp(net, pts, cot)
    fd = np.empty(net.n_params)
    for i in range(net.n_params):
        e = np.zeros(net.n_params)
        e[i] = 1e-6
        f = [np.sum(kappa_net_eval(net.with_theta(net.theta + s * e), pts) * cot) for s in (1, -1)]
        fd[i] = (f[0] - f[1]) / 2e-6
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_kappa_net_identity_output_uses_magnitude():
    net = mlp_init([2, 4, 2], "tanh", "identity", seed=2)
    pts = np.random.default_rng(1).random((5, 2))
    t = kappa_net_eval(net, pts)
    assert np.allclose(t[:, 0, 0], np.abs(mlp_forward(net, pts)[:, 0]))


def test_adam_first_step():
    state = AdamState(lr=1e-4)
    theta = adam_step(state, np.zeros(3), np.array([1.0, -2.0, 0.5]))
    # bias correction makes the first step lr * sign(g)
    assert np.allclose(theta, [-1e-4, 1e-4, -1e-4], rtol=1e-6)
    assert state.step == 1
    with pytest.raises(FloatingPointError):
        adam_step(state, theta, np.array([np.inf, 0.0, 0.0]))


def test_adam_minimizes_quadratic():
    state = AdamState(lr=0.05)
    x = np.array([3.0, -2.0])
    for _ in range(2000):
        x = adam_step(state, x, 2 * x)
    assert np.abs(x).max() < 1e-2


def test_checkpoint_roundtrip(tmp_path):
    net = mlp_init([3, 5, 1], "leaky-relu", "identity", seed=9, slope=0.1)
    save_checkpoint(net, tmp_path / "ck" / "sigma")
    back = load_checkpoint(tmp_path / "ck" / "sigma")
    assert np.array_equal(back.theta, net.theta)
    assert back.describe() == net.describe()
    assert (tmp_path / "ck" / "sigma.bin").stat().st_size == 8 * net.n_params
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_vjp_is_linear_in_cotangent(n_out, hidden, seed):
    rng = np.random.default_rng(seed)
    net = mlp_init([2, hidden, n_out], seed=seed)
    x = rng.random((4, 2))
    a, b = rng.standard_normal((2, 4, n_out))
    lhs = mlp_vjp(net, x, a + 2 * b)
    rhs = mlp_vjp(net, x, a) + 2 * mlp_vjp(net, x, b)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_zero_weights_output_bias_is_constant():
    net = mlp_init([2, 3, 1], "tanh", "identity")
    theta = np.zeros(net.n_params)
    theta[-1] = 0.7
    out = mlp_forward(net.with_theta(theta), np.random.default_rng(0).random((5, 2)))
    assert np.all(out == 0.7)
