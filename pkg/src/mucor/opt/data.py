"""Trusted data, observation masks, the relative L2 loss and error tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import GridMismatchError, TrainingError
from ..grid import StructuredGrid

SAMPLING_MODES = ("full", "time-prefix", "spatial-ratio")


@dataclass
class TrustedData:
    """Reference nodal values at steps 1..N with a (step, node) observation mask."""

    grid: StructuredGrid
    tau: float
    values: np.ndarray  # (N, n)
    mask: np.ndarray = None  # (N, n) bool
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.grid.node_count:
            raise GridMismatchError(f"trusted data shape {self.values.shape} does not match {self.grid}")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise GridMismatchError("observation mask shape differs from the data")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trusted data contains non-finite values")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.round(np.arange(1, self.n_steps + 1) * self.tau, 12)

    @property
    def observed_steps(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=1))

    def with_mask(self, mask, **extra) -> "TrustedData":
        prov = dict(self.provenance, **extra)
        return replace(self, mask=np.asarray(mask, dtype=bool), provenance=prov)


def _states(traj_or_array) -> np.ndarray:
    """Continuum-1 states at steps 1..N from a trajectory or an (N, n) array."""
    u1 = getattr(traj_or_array, "u1", None)
    if u1 is not None:
        return u1[1:]
    return np.asarray(traj_or_array, dtype=float)


def loss_parts(u: np.ndarray, data: TrustedData, M) -> tuple[np.ndarray, np.ndarray]:
    """Per-step numerators e^T M e and denominators (mU)^T M (mU) under the mask."""
    if u.shape != data.values.shape:
        raise GridMismatchError(f"solution shape {u.shape} differs from data {data.values.shape}")
    m = data.mask.astype(float)
    err = m * (u - data.values)
    ref = m * data.values
    num = np.einsum("kn,kn->k", err, (M @ err.T).T)
    den = np.einsum("kn,kn->k", ref, (M @ ref.T).T)
    return num, den


def relative_l2_loss(traj, data: TrustedData, M) -> float:
    """100 * sum_n e_n^T M e_n / sum_n U_n^T M U_n over observed entries."""
    if not data.mask.any():
        raise TrainingError("trusted data has no observed entries")
    num, den = loss_parts(_states(traj), data, M)
    total = den.sum()
    if not total > 0:
        raise TrainingError("loss normalizer is zero: observed reference values vanish")
    return float(100.0 * num.sum() / total)


def evaluate(traj, data: TrustedData, M, steps=None) -> np.ndarray:
    """Relative L2 error (percent) of every step, as rows (t, error).

    Each row uses the loss formula restricted to that single step; the mask is
    ignored so held-out steps are scored too.
    """
    full = replace(data, mask=np.ones_like(data.mask))
    num, den = loss_parts(_states(traj), full, M)
    steps = np.arange(data.n_steps) if steps is None else np.asarray(steps)
    if np.any(den[steps] <= 0):
        raise TrainingError("zero reference norm at a reported step")
    err = 100.0 * num[steps] / den[steps]
    return np.column_stack([data.times[steps], err])


def write_error_table(table: np.ndarray, path, header=("t", "error_percent")) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(v)) for v in row])


def read_error_table(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows]).reshape(-1, 2)


def sample_trusted_data(full: TrustedData, mode: str = "full", seed: int = 0,
                        t_star: float | None = None, ratio: float | None = None) -> TrustedData:
    """Restrict the observation mask.

    ``time-prefix`` keeps steps with t <= t_star; ``spatial-ratio`` keeps
    floor(ratio * node_count) nodes drawn without replacement, the same nodes
    at every step.
    """
    n_steps, n = full.values.shape
    if mode == "full":
        out = full.with_mask(np.ones((n_steps, n), dtype=bool), sampling="full")
    elif mode == "time-prefix":
        if t_star is None:
            raise ValueError("time-prefix sampling needs t_star")
        keep = full.times <= t_star * (1 + 1e-12)
        mask = np.zeros((n_steps, n), dtype=bool)
        mask[keep] = True
        out = full.with_mask(mask, sampling="time-prefix", t_star=float(t_star))
    elif mode == "spatial-ratio":
        if ratio is None or not 0 < ratio <= 1:
            raise ValueError(f"spatial ratio must lie in (0, 1], got {ratio!r}")
        count = int(np.floor(ratio * n + 1e-9))
        nodes = np.random.default_rng(seed).choice(n, size=count, replace=False)
        mask = np.zeros((n_steps, n), dtype=bool)
        mask[:, nodes] = True
        out = full.with_mask(mask, sampling="spatial-ratio", ratio=float(ratio), seed=int(seed))
    else:
        raise ValueError(f"unknown sampling mode {mode!r}; expected one of {SAMPLING_MODES}")
    if not out.mask.any():
        raise TrainingError("sampling left no observed entries")
    return out
