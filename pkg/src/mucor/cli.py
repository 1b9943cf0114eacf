"""Command-line entry point ``mucor``.

Every command reads a JSON experiment config, writes its artifacts below the
output directory and records a manifest in ``<output>/manifests/<command>.json``
(inputs and outputs with sha256 hashes, versions, wall time). Failures print a
single JSON line to stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import scipy

from .errors import MucorError
from .fem.assembly import assemble_mass
from .fem.reference import coarse_average, solve_fine_reference
from .fem.stepping import DualTrajectory
from .fields import (TensorCellField, load_field, load_time_series, store_field,
                     store_time_series)
from .homogenize import interpolate_to_nodes, upscale
from .neural import load_checkpoint
from .opt.data import TrustedData, evaluate, sample_trusted_data, write_error_table
from .opt.gradients import gradient_discrete, gradient_fd_problem, relative_errors
from .opt.toy import toy_instance
from .opt.training import train, write_loss_history
from .pipeline import ConfigError, ExperimentConfig

log = logging.getLogger("mucor")

VERSION = "0.1.0"

FINE_KAPPA = "fine_kappa.csv"
KAPPA_STAR = "kappa_star.csv"
TRUSTED = "trusted"
CHECKPOINTS = "checkpoints"
MANIFESTS = "manifests"


class CommandError(MucorError):
    pass


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(root: Path, rel: str) -> list[Path]:
    p = root / rel
    if p.is_dir():
        return sorted(q for q in p.rglob("*") if q.is_file())
    return [p] if p.exists() else []


class Run:
    """Book-keeping for one command: declared inputs/outputs and the manifest."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path, options: dict):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.options = options
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.start = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def need(self, rel: str) -> Path:
        path = self.out / rel
        if not path.exists():
            raise CommandError(f"missing input {path}")
        self.inputs.append(rel)
        return path

    def made(self, rel: str) -> Path:
        self.outputs.append(rel)
        return self.out / rel

    def _hashes(self, rels) -> dict:
        out = {}
        for rel in rels:
            for f in _files(self.out, rel):
                out[f.relative_to(self.out).as_posix()] = sha256(f)
        return dict(sorted(out.items()))

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "options": self.options,
            "config": self.cfg.resolved(),
            "seed": self.cfg.seed,
            "inputs": self._hashes(self.inputs),
            "outputs": self._hashes(self.outputs),
            "versions": {"mucor": VERSION, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "threads": os.environ.get("MUCOR_THREADS"),
            "wall_time_s": round(time.perf_counter() - self.start, 3),
        }
        path = self.out / MANIFESTS / f"{self.command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        return path


# --- shared loaders ---------------------------------------------------------------


def _kappa_nodes(run: Run) -> np.ndarray:
    field = load_field(run.need(KAPPA_STAR), run.cfg.coarse_grid())
    if not isinstance(field, TensorCellField):
        raise CommandError(f"{run.out / KAPPA_STAR} does not hold a tensor field")
    return interpolate_to_nodes(field).values


def _trusted(run: Run) -> TrustedData:
    grid, tau, kind, frames = load_time_series(run.need(TRUSTED), run.cfg.coarse_grid())
    if kind != "node":
        raise CommandError("trusted data must be a nodal time series")
    if frames.shape[0] != run.cfg.n_steps or not np.isclose(tau, run.cfg.tau):
        raise CommandError("trusted data does not match the configured time stepping")
    return TrustedData(grid, tau, frames)


def _sampled(run: Run, data: TrustedData) -> TrustedData:
    tc = run.cfg.training_config()
    return sample_trusted_data(data, tc.sampling, tc.seed, tc.t_star, tc.ratio)


def _load_nets(run: Run, ckpt_dir: str, tag: str = "final"):
    nets = []
    for name in ("kappa_net", "sigma_net"):
        for suffix in (".json", ".bin"):
            run.need(f"{ckpt_dir}/{name}_{tag}{suffix}")
        nets.append(load_checkpoint(run.out / ckpt_dir / f"{name}_{tag}"))
    return tuple(nets)


def _trajectory(run: Run, rel: str) -> DualTrajectory:
    grid, tau, kind, frames = load_time_series(run.need(rel), run.cfg.coarse_grid())
    if kind != "dual":
        raise CommandError(f"{run.out / rel} is not a two-continuum trajectory")
    n = grid.node_count
    u1 = np.vstack([np.zeros(n), frames[:, 0]])
    u2 = np.vstack([np.zeros(n), frames[:, 1]])
    return DualTrajectory(grid, tau, u1, u2)


# --- commands -------------------------------------------------------------------------


def cmd_gen_field(run: Run) -> None:
    store_field(run.cfg.fine_field(), run.made(FINE_KAPPA))


def cmd_homogenize(run: Run) -> None:
    fine = load_field(run.need(FINE_KAPPA), run.cfg.fine_grid())
    est = run.cfg.raw["physics"].get("estimator", "primal-dual")
    store_field(upscale(fine, run.cfg.coarse_grid(), est), run.made(KAPPA_STAR))


def cmd_reference(run: Run) -> None:
    cfg = run.cfg
    fine_grid = cfg.fine_grid()
    fine = load_field(run.need(FINE_KAPPA), fine_grid)
    phys = cfg.raw["physics"]
    sol = solve_fine_reference(fine.values, cfg.beta, cfg.source().load_vector(fine_grid), fine_grid,
                               cfg.tau, cfg.n_steps, linear_solver=phys.get("linear_solver", "direct"))
    coarse = coarse_average(sol[1:], fine_grid)
    store_time_series(list(coarse), run.made(TRUSTED), cfg.coarse_grid(), cfg.tau)


def cmd_solve(run: Run) -> None:
    kappa = _kappa_nodes(run)
    if run.options.get("baseline"):
        traj = run.cfg.problem(kappa).baseline()
        store_time_series(traj, run.made("baseline"))
        return
    nets = _load_nets(run, run.options.get("checkpoint_dir") or CHECKPOINTS)
    traj = run.cfg.problem(kappa, nets).forward()
    store_time_series(traj, run.made("solution"))
    if traj.newton_iterations:
        with open(run.made("newton.csv"), "w") as fh:
            fh.write("step,iterations,final_residual\n")
            for k, (its, hist) in enumerate(zip(traj.newton_iterations, traj.residual_history), 1):
                fh.write(f"{k},{its},{hist[-1]!r}\n")


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    problem = cfg.problem(_kappa_nodes(run))
    data = _sampled(run, _trusted(run))
    tc = cfg.training_config()
    if run.options.get("grad_mode"):
        tc.grad_mode = run.options["grad_mode"]
    if run.options.get("epochs"):
        tc.epochs = int(run.options["epochs"])
    result = train(tc, problem, data, checkpoint_dir=run.out / CHECKPOINTS)
    run.made(CHECKPOINTS)
    write_loss_history(result.history, run.made("loss_history.csv"))
    summary = {"epochs": tc.epochs, "grad_mode": tc.grad_mode, "failures": result.failures,
               "final_loss": float(result.history[np.isfinite(result.history)][-1]),
               "observed_entries": int(data.mask.sum()), "sampling": data.provenance}
    with open(run.made("train_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def cmd_eval(run: Run) -> None:
    data = _trusted(run)
    M = assemble_mass(run.cfg.coarse_grid())
    rel = run.options.get("solution") or "solution"
    table = evaluate(_trajectory(run, rel), data, M)
    write_error_table(table, run.made("error_table.csv"))
    if (run.out / "baseline").exists() and rel != "baseline":
        write_error_table(evaluate(_trajectory(run, "baseline"), data, M),
                          run.made("error_table_baseline.csv"))


def cmd_gradcheck(run: Run) -> None:
    """Discrete adjoint vs five-point central differences on a small instance."""
    problem, data = toy_instance(run.cfg.seed)
    exact = gradient_discrete(problem, data).flat
    fd = gradient_fd_problem(problem, data, step=float(run.options.get("fd_step") or 1e-3), order=4).flat
    err = relative_errors(exact, fd)
    tol = float(run.options.get("tolerance") or 1e-5)
    report = {"n_params": int(exact.size), "max_rel_err": float(err.max()),
              "tolerance": tol, "passed": bool(err.max() <= tol)}
    with open(run.made("gradcheck.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"max rel err {report['max_rel_err']:.3e} (tolerance {tol:g}): "
          f"{'ok' if report['passed'] else 'FAILED'}")
    if not report["passed"]:
        raise CommandError(f"gradient check failed: max rel err {report['max_rel_err']:.3e} > {tol:g}")


COMMANDS = {
    "gen-field": cmd_gen_field,
    "homogenize": cmd_homogenize,
    "reference": cmd_reference,
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}

PIPELINE = [("gen-field", {}), ("homogenize", {}), ("reference", {}), ("solve", {"baseline": True}),
            ("train", {}), ("solve", {}), ("eval", {})]


def _thread_limit():
    value = os.environ.get("MUCOR_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def run_command(command: str, cfg: ExperimentConfig, out: Path, options: dict) -> Path:
    run = Run(command, cfg, out, options)
    with _thread_limit():
        COMMANDS[command](run)
    name = command if not options.get("baseline") else f"{command}-baseline"
    run.command = name
    return run.finish()


def replay(manifest_path: Path, out: Path) -> dict:
    """Re-run a manifest into ``out`` and compare every output hash."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    src_root = manifest_path.parent.parent
    out.mkdir(parents=True, exist_ok=True)
    for rel, digest in manifest["inputs"].items():
        src = src_root / rel
        if not src.exists() or sha256(src) != digest:
            raise CommandError(f"replay input {src} is missing or was modified")
        dst = out / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        if src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
    cfg = ExperimentConfig.from_dict(manifest["config"], src_root)
    command = manifest["command"].removesuffix("-baseline")
    new_manifest = run_command(command, cfg, out, manifest["options"])
    with open(new_manifest) as fh:
        fresh = json.load(fh)
    mismatched = sorted(k for k in set(manifest["outputs"]) | set(fresh["outputs"])
                        if manifest["outputs"].get(k) != fresh["outputs"].get(k))
    return {"manifest": str(manifest_path), "outputs": len(manifest["outputs"]),
            "mismatched": mismatched, "identical": not mismatched}


# --- argument parsing ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment JSON document")
    p.add_argument("--output", help="output directory (default: output.dir of the config)")
    p.add_argument("--seed", type=int, help="overrides training.seed")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mucor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mucor {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-field", "homogenize", "reference", "eval", "run"):
        p = sub.add_parser(name)
        _common(p)
        if name == "eval":
            p.add_argument("--solution", help="trajectory directory to score (default: solution)")
        if name == "run":
            p.add_argument("--grad-mode", choices=("discrete", "continuous", "fd"))
            p.add_argument("--epochs", type=int)
    p = sub.add_parser("solve")
    _common(p)
    p.add_argument("--baseline", action="store_true", help="homogenized model only (no networks)")
    p.add_argument("--checkpoint-dir", help="directory holding kappa_net_final / sigma_net_final")
    p = sub.add_parser("train")
    _common(p)
    p.add_argument("--grad-mode", choices=("discrete", "continuous", "fd"))
    p.add_argument("--epochs", type=int, help="overrides training.epochs")
    p = sub.add_parser("gradcheck")
    _common(p, config_required=False)
    p.add_argument("--grad-mode", choices=("discrete",), default="discrete")
    p.add_argument("--fd-step", type=float)
    p.add_argument("--tolerance", type=float)
    p = sub.add_parser("replay")
    p.add_argument("manifest")
    p.add_argument("--output", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _options(args) -> dict:
    keys = ("baseline", "checkpoint_dir", "grad_mode", "epochs", "solution", "fd_step", "tolerance")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) not in (None, False)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            report = replay(Path(args.manifest), Path(args.output))
            print(json.dumps(report))
            if not report["identical"]:
                raise CommandError(f"replay differs in {len(report['mismatched'])} files: "
                                   f"{', '.join(report['mismatched'][:5])}")
            return 0
        if args.config:
            cfg = ExperimentConfig.load(args.config).with_seed(args.seed)
        else:
            cfg = ExperimentConfig.from_dict({}).with_seed(args.seed)
        out = Path(args.output) if args.output else cfg.resolve(cfg.raw["output"]["dir"])
        options = _options(args)
        if args.command == "run":
            for name, extra in PIPELINE:
                opts = dict(extra)
                if name == "train":
                    opts.update(options)
                run_command(name, cfg, out, opts)
            return 0
        run_command(args.command, cfg, out, options)
        return 0
    except (MucorError, ConfigError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
