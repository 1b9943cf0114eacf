"""A small, fully deterministic instance for gradient checks."""
from __future__ import annotations

import numpy as np

from ..fem.assembly import Assembler, iso_tensors
from ..grid import build_grid
from ..neural import Mlp, activate, mlp_init
from .data import TrustedData
from .problem import CorrectionProblem

KINK_MARGIN = 1e-2


def kink_margin(net: Mlp, points: np.ndarray) -> float:
    """Smallest |pre-activation| over layers whose activation has a kink."""
    margin = np.inf
    a = points
    layers = list(net.layers())
    for l, (w, b) in enumerate(layers):
        z = a @ w.T + b
        kind = net.output if l == len(layers) - 1 else net.hidden
        if kind in ("leaky-relu", "abs"):
            margin = min(margin, float(np.abs(z).min()))
        a = activate(kind, z, net.slope)
    return margin


def toy_instance(seed: int = 0, nx: int = 3, n_steps: int = 2, tau: float = 0.1, beta: float = 0.0,
                 time_inputs: bool = False):
    """3x3 grid, 2 steps, nets [2,4,2] and [2,4,1] with random biases.

    Parameters are redrawn until every kinked activation stays at least
    ``KINK_MARGIN`` away from its kink at all inputs, so finite differences
    of modest step see a smooth loss.
    """
    rng = np.random.default_rng(seed)
    grid = build_grid(nx, nx)
    n = grid.node_count
    n_in = 3 if time_inputs else 2
    kappa_net = mlp_init([n_in, 4, 2], "tanh", "abs", seed=seed)
    sigma_net = mlp_init([n_in, 4, 1], "leaky-relu", "identity", seed=seed + 1)
    kappa1 = iso_tensors(1.0 + rng.random(n))
    load = Assembler.for_grid(grid).load(lambda x, y: 5.0 + x * y)
    values = 0.3 * rng.random((n_steps, n))
    values[:, grid.boundary_nodes] = 0.0
    data = TrustedData(grid, tau, values)
    problem = CorrectionProblem(grid, tau, n_steps, kappa1, load, kappa_net, sigma_net, beta,
                                time_inputs=time_inputs)
    for _ in range(1000):
        knet = kappa_net.with_theta(kappa_net.theta + 0.3 * rng.standard_normal(kappa_net.n_params))
        snet = sigma_net.with_theta(sigma_net.theta + 0.3 * rng.standard_normal(sigma_net.n_params))
        pts = problem.inputs
        if min(kink_margin(knet, pts), kink_margin(snet, pts)) > KINK_MARGIN:
            problem.kappa_net, problem.sigma_net = knet, snet
            return problem, data
    raise RuntimeError("could not draw a kink-free toy instance")
