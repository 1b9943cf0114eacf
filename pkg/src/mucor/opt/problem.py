"""The learnable two-continuum model: fixed coarse operators plus two networks."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from ..fem.assembly import iso_tensors
from ..fem.stepping import DualCoefficients, DualSolver, DualTrajectory
from ..grid import StructuredGrid
from ..neural import Mlp, kappa_net_eval, mlp_forward


@dataclass
class CorrectionProblem:
    """Coarse model whose second-continuum permeability and transfer coefficient are MLPs.

    With ``time_inputs`` the nets see (x, y, t_k) and produce per-step
    coefficients; otherwise they see (x, y) only.
    """

    grid: StructuredGrid
    tau: float
    n_steps: int
    kappa1: np.ndarray  # (n, 2, 2) nodal homogenized tensors
    source: np.ndarray  # load vector (n,) or (N, n)
    kappa_net: Mlp
    sigma_net: Mlp
    beta: float = 0.0
    source2: Optional[np.ndarray] = None
    time_inputs: bool = False
    linear_solver: str = "direct"

    def __post_init__(self):
        want = 3 if self.time_inputs else 2
        for name, net, n_out in (("kappa", self.kappa_net, 2), ("sigma", self.sigma_net, 1)):
            if net.n_in != want or net.n_out != n_out:
                raise ValueError(f"{name}-net must map {want} inputs to {n_out} outputs, "
                                 f"got widths {net.widths}")

    @cached_property
    def solver(self) -> DualSolver:
        return DualSolver(self.grid, self.tau, self.n_steps, self.kappa1, self.beta, self.linear_solver)

    @property
    def M(self):
        return self.solver.M

    @property
    def n_kappa(self) -> int:
        return self.kappa_net.n_params

    @property
    def n_params(self) -> int:
        return self.kappa_net.n_params + self.sigma_net.n_params

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.kappa_net.theta, self.sigma_net.theta])

    def split(self, theta: np.ndarray) -> tuple[Mlp, Mlp]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        return (self.kappa_net.with_theta(theta[:self.n_kappa]),
                self.sigma_net.with_theta(theta[self.n_kappa:]))

    def set_theta(self, theta: np.ndarray) -> None:
        self.kappa_net, self.sigma_net = self.split(theta)

    @cached_property
    def inputs(self) -> np.ndarray:
        """Network inputs: (n, 2) node coordinates, or (N * n, 3) step-major with t_k."""
        xy = self.grid.node_coords
        if not self.time_inputs:
            return xy
        n = xy.shape[0]
        t = np.repeat(np.arange(1, self.n_steps + 1) * self.tau, n)
        return np.column_stack([np.tile(xy, (self.n_steps, 1)), t])

    def _per_step(self, values: np.ndarray) -> np.ndarray:
        if not self.time_inputs:
            return values
        return values.reshape((self.n_steps, self.grid.node_count) + values.shape[1:])

    def coefficients(self, theta: Optional[np.ndarray] = None) -> DualCoefficients:
        knet, snet = (self.kappa_net, self.sigma_net) if theta is None else self.split(theta)
        kappa2 = self._per_step(kappa_net_eval(knet, self.inputs))
        sigma = self._per_step(mlp_forward(snet, self.inputs)[:, 0])
        return DualCoefficients(self.kappa1, kappa2, sigma, self.source, self.source2, self.beta)

    def forward(self, theta: Optional[np.ndarray] = None) -> DualTrajectory:
        return self.solver.solve(self.coefficients(theta))

    def baseline(self) -> DualTrajectory:
        """Homogenization-only solution: zero transfer, so ``u1`` solves the single-continuum model."""
        n = self.grid.node_count
        coeffs = DualCoefficients(self.kappa1, iso_tensors(np.ones(n)), np.zeros(n),
                                  self.source, None, self.beta)
        return self.solver.solve(coeffs)
