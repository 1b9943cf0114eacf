"""Experiment configuration and the builders shared by the CLI commands.

A config is one JSON document with sections ``grid``, ``time``, ``field``,
``physics``, ``networks``, ``training`` and ``output``. Relative paths inside
it are resolved against the config file's directory.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .fields import ChannelSpec, SourceSpec, generate_channel_field
from .grid import StructuredGrid, build_grid, refine
from .neural import Mlp, mlp_init
from .opt.problem import CorrectionProblem
from .opt.training import TrainingConfig

SECTIONS = ("grid", "time", "field", "physics", "networks", "training", "output")

DEFAULTS = {
    "grid": {"nx": 10, "ny": 10, "refine": 10},
    "time": {"T": 1.0, "tau": 0.1},
    "field": {},
    "physics": {"beta": 0.0, "source": {"terms": [{"type": "constant", "value": 1.0}]},
                "estimator": "primal-dual", "linear_solver": "direct"},
    "networks": {
        "kappa": {"hidden": [100] * 5, "activation": "tanh", "output": "abs"},
        "sigma": {"hidden": [100] * 5, "activation": "leaky-relu", "output": "identity", "slope": 0.2},
        "time_inputs": None,
    },
    "training": {},
    "output": {"dir": "runs/default"},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data, path.parent.resolve())

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, data), Path(base_dir))
        cfg.validate()
        return cfg

    # --- accessors ------------------------------------------------------------

    @property
    def grid(self) -> dict:
        return self.raw["grid"]

    @property
    def tau(self) -> float:
        return float(self.raw["time"]["tau"])

    @property
    def final_time(self) -> float:
        return float(self.raw["time"]["T"])

    @property
    def n_steps(self) -> int:
        return int(round(self.final_time / self.tau))

    @property
    def beta(self) -> float:
        return float(self.raw["physics"].get("beta", 0.0))

    @property
    def seed(self) -> int:
        return int(self.raw["training"].get("seed", 0))

    @property
    def time_inputs(self) -> bool:
        flag = self.raw["networks"].get("time_inputs")
        return self.beta != 0.0 if flag is None else bool(flag)

    def validate(self) -> None:
        g = self.grid
        for key in ("nx", "ny", "refine"):
            if not isinstance(g.get(key), int) or g[key] < 1:
                raise ConfigError(f"grid.{key} must be a positive integer")
        if not self.tau > 0 or not self.final_time > 0:
            raise ConfigError("time.T and time.tau must be positive")
        ratio = self.final_time / self.tau
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(f"T/tau = {ratio} is not an integer")
        if self.beta < 0:
            raise ConfigError("physics.beta must be non-negative")
        TrainingConfig.from_dict(self.raw["training"])
        spec = self.raw["field"].get("spec")
        if isinstance(spec, str) and not self.resolve(spec).exists():
            raise ConfigError(f"field spec not found: {self.resolve(spec)}")

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        raw = copy.deepcopy(self.raw)
        raw["training"]["seed"] = int(seed)
        return ExperimentConfig(raw, self.base_dir)

    def resolved(self) -> dict:
        """Self-contained copy: the channel spec is inlined so the document can be replayed anywhere."""
        raw = copy.deepcopy(self.raw)
        raw["field"]["spec"] = self.channel_spec().to_dict()
        return raw

    # --- builders ---------------------------------------------------------------

    def coarse_grid(self) -> StructuredGrid:
        return build_grid(self.grid["nx"], self.grid["ny"])

    def fine_grid(self) -> StructuredGrid:
        return refine(self.coarse_grid(), self.grid["refine"])

    def channel_spec(self) -> ChannelSpec:
        spec = self.raw["field"].get("spec", {})
        if isinstance(spec, str):
            return ChannelSpec.from_json(self.resolve(spec))
        return ChannelSpec(**spec)

    def source(self) -> SourceSpec:
        return SourceSpec.from_dict(self.raw["physics"]["source"])

    def training_config(self) -> TrainingConfig:
        return TrainingConfig.from_dict(self.raw["training"])

    def networks(self) -> tuple[Mlp, Mlp]:
        nets = self.raw["networks"]
        n_in = 3 if self.time_inputs else 2
        out = []
        for name, n_out, offset in (("kappa", 2, 0), ("sigma", 1, 1)):
            spec = nets[name]
            seed = spec.get("seed", self.seed + offset)
            widths = [n_in] + list(spec["hidden"]) + [n_out]
            out.append(mlp_init(widths, spec["activation"], spec["output"], seed, spec.get("slope", 0.2)))
        return out[0], out[1]

    def problem(self, kappa1_nodes: np.ndarray, nets: Optional[tuple] = None) -> CorrectionProblem:
        coarse = self.coarse_grid()
        knet, snet = nets if nets is not None else self.networks()
        return CorrectionProblem(coarse, self.tau, self.n_steps, kappa1_nodes,
                                 self.source().load_vector(coarse), knet, snet, self.beta,
                                 time_inputs=self.time_inputs,
                                 linear_solver=self.raw["physics"].get("linear_solver", "direct"))

    def fine_field(self):
        return generate_channel_field(self.channel_spec(), self.fine_grid())
