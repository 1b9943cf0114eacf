"""Adam training of the correction networks."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..errors import MucorError, TrainingError
from ..neural import AdamState, adam_step, save_checkpoint
from .data import TrustedData
from .gradients import GRAD_MODES, compute_gradient
from .problem import CorrectionProblem

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    epochs: int = 12000
    lr: float = 1e-4
    seed: int = 0
    grad_mode: str = "discrete"
    sampling: str = "full"
    t_star: Optional[float] = None
    ratio: Optional[float] = None
    checkpoint_every: int = 0
    log_every: int = 500
    max_failures: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise ValueError("sampling ratio must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingResult:
    theta: np.ndarray
    history: np.ndarray  # loss (percent) at the parameters used in each epoch; nan if skipped
    failures: int = 0
    wall_time: float = 0.0
    checkpoints: list = field(default_factory=list)


def train(config: TrainingConfig, problem: CorrectionProblem, data: TrustedData,
          checkpoint_dir=None, callback: Optional[Callable[[int, float], None]] = None) -> TrainingResult:
    """Run ``config.epochs`` iterations of forward solve, loss, gradient and Adam update.

    A failed epoch (solver breakdown, non-finite loss or gradient) restores the
    last good parameters and halves the learning rate; ``max_failures``
    consecutive failures abort the run.
    """
    if not data.mask.any():
        raise TrainingError("trusted data has no observed entries")
    if config.grad_mode == "continuous" and (problem.beta != 0.0 or problem.time_inputs):
        raise TrainingError("continuous-adjoint gradients are available for the linear model only")
    theta = problem.theta.copy()
    state = AdamState(lr=config.lr)
    history = np.full(config.epochs, np.nan)
    good = (theta.copy(), None)
    failures = consecutive = 0
    saved = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        try:
            grad = compute_gradient(problem, data, config.grad_mode, theta)
            if not np.isfinite(grad.loss):
                raise FloatingPointError("non-finite loss")
            new_theta = adam_step(state, theta, grad.flat)
        except (MucorError, FloatingPointError, np.linalg.LinAlgError) as exc:
            failures += 1
            consecutive += 1
            log.warning("epoch %d failed (%s); restoring last good parameters", epoch, exc)
            if consecutive >= config.max_failures:
                raise TrainingError(f"aborting after {consecutive} consecutive failed epochs "
                                    f"(last: {exc})") from exc
            theta = good[0].copy()
            if good[1] is not None:
                state = _copy_state(good[1])
            state.lr *= 0.5
            continue
        consecutive = 0
        history[epoch] = grad.loss
        good = (theta.copy(), _copy_state(state))
        theta = new_theta
        if callback is not None:
            callback(epoch, grad.loss)
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d loss %.6g%%", epoch, grad.loss)
        if checkpoint_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            saved.append(_save(problem, theta, Path(checkpoint_dir), f"epoch{epoch + 1:06d}"))
    problem.set_theta(theta)
    if checkpoint_dir is not None:
        saved.append(_save(problem, theta, Path(checkpoint_dir), "final"))
    return TrainingResult(theta, history, failures, time.perf_counter() - start, saved)


def _copy_state(state: AdamState) -> AdamState:
    return AdamState(state.lr, state.beta1, state.beta2, state.eps, state.step,
                     None if state.m is None else state.m.copy(),
                     None if state.v is None else state.v.copy())


def _save(problem: CorrectionProblem, theta: np.ndarray, directory: Path, tag: str) -> str:
    knet, snet = problem.split(theta)
    save_checkpoint(knet, directory / f"kappa_net_{tag}")
    save_checkpoint(snet, directory / f"sigma_net_{tag}")
    return tag


def write_loss_history(history: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_percent"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])


def read_loss_history(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[1]) for r in rows])


def smoothed_monotone_fraction(history: np.ndarray, window: int = 100) -> float:
    """Fraction of consecutive window means that do not increase."""
    h = np.asarray(history, dtype=float)
    h = h[np.isfinite(h)]
    n = h.size // window
    if n < 2:
        raise ValueError("history too short for two smoothing windows")
    means = h[:n * window].reshape(n, window).mean(axis=1)
    return float(np.mean(np.diff(means) <= 0))
