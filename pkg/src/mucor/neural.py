"""Small dense networks with hand-written reverse mode, and Adam.

All parameters of a network live in one flat float64 vector ``theta``;
layer ``l`` owns a weight block of shape (fan_out, fan_in) followed by its
bias, in layer order.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

KAPPA_FLOOR = 1e-8
HIDDEN = ("tanh", "leaky-relu", "identity")
OUTPUT = ("identity", "abs")


@dataclass
class Mlp:
    widths: list
    hidden: str = "tanh"
    output: str = "identity"
    slope: float = 0.2
    seed: int = 0
    theta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("an MLP needs at least an input and an output width")
        if self.hidden not in HIDDEN or self.output not in OUTPUT:
            raise ValueError(f"unsupported activations {self.hidden!r}/{self.output!r}")
        n = sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))
        if self.theta is None:
            self.theta = init_params(self.widths, self.seed)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (n,):
            raise ValueError(f"parameter vector has length {self.theta.size}, expected {n}")

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def layers(self, theta=None):
        """Yield (W, b) views into ``theta``."""
        theta = self.theta if theta is None else theta
        pos = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = theta[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = theta[pos:pos + fan_out]
            pos += fan_out
            yield w, b

    def with_theta(self, theta) -> "Mlp":
        return Mlp(self.widths, self.hidden, self.output, self.slope, self.seed, np.array(theta, dtype=float))

    def describe(self) -> dict:
        return {"widths": self.widths, "hidden": self.hidden, "output": self.output,
                "slope": self.slope, "seed": self.seed}


def init_params(widths, seed: int) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def mlp_init(widths, hidden="tanh", output="identity", seed=0, slope=0.2) -> Mlp:
    return Mlp(list(widths), hidden, output, slope, seed)


def activate(kind, z, slope):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "leaky-relu":
        return np.where(z > 0, z, slope * z)
    if kind == "abs":
        return np.abs(z)
    return z


def _act_grad(kind, z, a, slope):
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "leaky-relu":
        return np.where(z > 0, 1.0, slope)
    if kind == "abs":
        return np.sign(z)
    return np.ones_like(z)


def _check_inputs(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ValueError(f"expected inputs of shape (batch, {net.n_in}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    if not np.all(np.isfinite(net.theta)):
        raise ValueError("non-finite network parameters")
    return x


def _forward(net: Mlp, x):
    acts, pres = [x], []
    layers = list(net.layers())
    for l, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        kind = net.output if l == len(layers) - 1 else net.hidden
        pres.append(z)
        acts.append(activate(kind, z, net.slope))
    return acts, pres


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Outputs for a batch of points, shape (batch, n_out)."""
    acts, _ = _forward(net, _check_inputs(net, x))
    return acts[-1]


def mlp_vjp(net: Mlp, x, cotangent) -> np.ndarray:
    """sum over the batch of (d output / d theta)^T cotangent, as a flat vector."""
    x = _check_inputs(net, x)
    cot = np.asarray(cotangent, dtype=float)
    if cot.shape != (x.shape[0], net.n_out):
        raise ValueError(f"cotangent shape {cot.shape} does not match outputs {(x.shape[0], net.n_out)}")
    acts, pres = _forward(net, x)
    layers = list(net.layers())
    grads = []
    delta = cot
    for l in range(len(layers) - 1, -1, -1):
        kind = net.output if l == len(layers) - 1 else net.hidden
        delta = delta * _act_grad(kind, pres[l], acts[l + 1], net.slope)
        grads.append((delta.T @ acts[l], delta.sum(axis=0)))
        if l:
            delta = delta @ layers[l][0]
    out = []
    for gw, gb in reversed(grads):
        out.append(gw.ravel())
        out.append(gb)
    return np.concatenate(out)


def kappa_net_eval(net: Mlp, points, floor: float = KAPPA_FLOOR) -> np.ndarray:
    """Diagonal permeability tensors diag(|o1|, |o2|), shape (batch, 2, 2).

    Entries below ``floor`` are raised to it with a warning.
    """
    if net.n_out != 2:
        raise ValueError(f"kappa-net must have 2 outputs, has {net.n_out}")
    out = np.abs(mlp_forward(net, points))
    low = out < floor
    if np.any(low):
        warnings.warn(f"kappa-net produced {int(low.sum())} degenerate diagonal entries; "
                      f"floored to {floor:g}", RuntimeWarning, stacklevel=2)
        out = np.where(low, floor, out)
    tensors = np.zeros((out.shape[0], 2, 2))
    tensors[:, 0, 0] = out[:, 0]
    tensors[:, 1, 1] = out[:, 1]
    return tensors


def kappa_net_vjp(net: Mlp, points, tensor_cotangent, floor: float = KAPPA_FLOOR) -> np.ndarray:
    """Parameter gradient given d(loss)/d(tensor) for the tensors of :func:`kappa_net_eval`."""
    raw = mlp_forward(net, points)
    cot = np.stack([tensor_cotangent[:, 0, 0], tensor_cotangent[:, 1, 1]], axis=1)
    cot = np.where(np.abs(raw) < floor, 0.0, cot)
    if net.output != "abs":
        cot = cot * np.sign(raw)
    return mlp_vjp(net, points, cot)


# --- Adam -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray):
    """Bias-corrected Adam update; returns the new parameter vector (state is updated in place)."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(net: Mlp, path) -> None:
    """Write ``<path>.bin`` (little-endian float64 theta) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    net.theta.astype("<f8").tofile(path.with_suffix(".bin"))
    meta = dict(net.describe(), n_params=net.n_params, dtype="<f8")
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> Mlp:
    path = Path(path)
    meta_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    for p in (meta_path, bin_path):
        if not p.exists():
            raise FileNotFoundError(f"checkpoint file missing: {p}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    theta = np.fromfile(bin_path, dtype="<f8")
    if theta.size != meta["n_params"]:
        raise ValueError(f"{bin_path}: {theta.size} parameters, sidecar says {meta['n_params']}")
    return Mlp(meta["widths"], meta["hidden"], meta["output"], meta["slope"], meta["seed"], theta)
