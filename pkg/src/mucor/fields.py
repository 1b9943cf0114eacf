"""Cell and nodal fields, synthetic channel permeabilities, source terms and CSV I/O.

Every CSV file starts with a header ``# grid <nx> <ny> <kind>`` followed by
one line per grid row (bottom row first). Values are written with 17
significant digits so a store/load round trip is bit-exact.

kinds::

    cell       nx values per row, ny rows
    tensor     3 * nx values per row (k11, k12, k22 of each cell)
    node       nx + 1 values per row, ny + 1 rows
    dual       two stacked node blocks (u1 rows, then u2 rows)
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import FieldFormatError, GridMismatchError
from .grid import StructuredGrid, build_grid

KINDS = ("cell", "tensor", "node", "dual")


@dataclass(eq=False)
class ScalarCellField:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != self.grid.cell_count:
            raise GridMismatchError(
                f"{self.values.size} values for a grid with {self.grid.cell_count} cells")
        if not np.all(np.isfinite(self.values)):
            raise FieldFormatError("cell field contains non-finite values")


@dataclass(eq=False)
class TensorCellField:
    """Per-cell symmetric tensors stored as rows (k11, k12, k22)."""

    grid: StructuredGrid
    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float).reshape(-1, 3)
        if self.entries.shape[0] != self.grid.cell_count:
            raise GridMismatchError(
                f"{self.entries.shape[0]} tensors for a grid with {self.grid.cell_count} cells")
        if not np.all(np.isfinite(self.entries)):
            raise FieldFormatError("tensor field contains non-finite values")

    @property
    def k11(self):
        return self.entries[:, 0]

    @property
    def k12(self):
        return self.entries[:, 1]

    @property
    def k22(self):
        return self.entries[:, 2]

    def is_spd(self) -> np.ndarray:
        return (self.k11 > 0) & (self.k22 > 0) & (self.k11 * self.k22 - self.k12**2 > 0)


@dataclass(eq=False)
class NodalField:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.node_count:
            raise GridMismatchError(
                f"{self.values.shape[0]} values for a grid with {self.grid.node_count} nodes")
        if not np.all(np.isfinite(self.values)):
            raise FieldFormatError("nodal field contains non-finite values")


# --- channelized permeability -------------------------------------------------


@dataclass
class Stroke:
    x0: float
    y0: float
    x1: float
    y1: float
    width: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Points within ``width / 2`` of the segment."""
        p0 = np.array([self.x0, self.y0])
        d = np.array([self.x1 - self.x0, self.y1 - self.y0])
        rel = pts - p0
        length2 = float(d @ d)
        s = np.zeros(len(pts)) if length2 == 0.0 else np.clip(rel @ d / length2, 0.0, 1.0)
        dist = np.linalg.norm(rel - s[:, None] * d[None, :], axis=1)
        return dist <= self.width / 2


@dataclass
class ChannelSpec:
    background: float = 1.0
    channel: float = 100.0
    strokes: list = field(default_factory=list)
    seed: int = 0
    random_strokes: int = 0
    random_width: float = 0.05

    def __post_init__(self):
        self.strokes = [s if isinstance(s, Stroke) else Stroke(**s) for s in self.strokes]
        if not self.background > 0:
            raise ValueError("background permeability must be positive")
        if self.channel < self.background:
            raise ValueError("channel value must be >= background value")
        for s in self.strokes:
            coords = (s.x0, s.y0, s.x1, s.y1)
            if min(coords) < 0.0 or max(coords) > 1.0 or s.width <= 0:
                raise ValueError(f"stroke {s} lies outside the unit square or has no width")

    @classmethod
    def from_json(cls, path) -> "ChannelSpec":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return {
            "background": self.background, "channel": self.channel,
            "strokes": [vars(s) for s in self.strokes], "seed": self.seed,
            "random_strokes": self.random_strokes, "random_width": self.random_width,
        }

    def all_strokes(self) -> list:
        """Declared strokes plus ``random_strokes`` axis-aligned ones drawn from ``seed``."""
        strokes = list(self.strokes)
        rng = np.random.default_rng(self.seed)
        w = self.random_width
        for _ in range(self.random_strokes):
            a, b = np.sort(rng.uniform(w, 1 - w, size=2))
            c = rng.uniform(w, 1 - w)
            if rng.random() < 0.5:
                strokes.append(Stroke(a, c, b, c, w))
            else:
                strokes.append(Stroke(c, a, c, b, w))
        return strokes


def generate_channel_field(spec: ChannelSpec, grid: StructuredGrid) -> ScalarCellField:
    """Rasterize channels by cell-center membership."""
    values = np.full(grid.cell_count, float(spec.background))
    centers = grid.cell_centers
    for stroke in spec.all_strokes():
        values[stroke.contains(centers)] = spec.channel
    return ScalarCellField(grid, values)


# --- source terms ---------------------------------------------------------------


@dataclass
class SourceSpec:
    """Sum of simple time-independent source terms.

    Term types: ``constant`` {value}, ``box`` {x0, y0, x1, y1, value},
    ``gaussian`` {x, y, width, amplitude}, ``point`` {x, y, amplitude} and
    ``sine`` {amplitude} for ``a sin(pi x) sin(pi y)``.
    """

    terms: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, data) -> "SourceSpec":
        if isinstance(data, list):
            return cls(list(data))
        return cls(list(data.get("terms", [])))

    def density(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(np.broadcast(x, y).shape)
        for term in self.terms:
            kind = term["type"]
            if kind == "constant":
                out += term["value"]
            elif kind == "box":
                inside = ((x >= term["x0"]) & (x <= term["x1"]) & (y >= term["y0"]) & (y <= term["y1"]))
                out += term["value"] * inside
            elif kind == "gaussian":
                r2 = (x - term["x"]) ** 2 + (y - term["y"]) ** 2
                out += term["amplitude"] * np.exp(-r2 / (2 * term["width"] ** 2))
            elif kind == "sine":
                out += term["amplitude"] * np.sin(np.pi * x) * np.sin(np.pi * y)
            elif kind != "point":
                raise ValueError(f"unknown source term type {kind!r}")
        return out

    def load_vector(self, grid: StructuredGrid) -> np.ndarray:
        """Nodal load vector ``int f psi_i`` on ``grid``; point terms give ``a psi_i(x0)``."""
        from .fem.assembly import Assembler

        vec = Assembler.for_grid(grid).load(self.density)
        for term in self.terms:
            if term["type"] == "point":
                vec += term["amplitude"] * point_basis(grid, term["x"], term["y"])
        return vec


def point_basis(grid: StructuredGrid, x: float, y: float) -> np.ndarray:
    """Values of all Q1 basis functions at the point (x, y)."""
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError("point source outside the unit square")
    i = min(int(x * grid.nx), grid.nx - 1)
    j = min(int(y * grid.ny), grid.ny - 1)
    sx = x * grid.nx - i
    sy = y * grid.ny - j
    out = np.zeros(grid.node_count)
    nodes = grid.cell_nodes[grid.cell_id(i, j)]
    out[nodes] = [(1 - sx) * (1 - sy), sx * (1 - sy), sx * sy, (1 - sx) * sy]
    return out


# --- CSV storage --------------------------------------------------------------------

PathLike = Union[str, os.PathLike]


def _rows_for(kind: str, grid: StructuredGrid):
    if kind == "cell":
        return grid.ny, grid.nx
    if kind == "tensor":
        return grid.ny, 3 * grid.nx
    if kind == "node":
        return grid.ny + 1, grid.nx + 1
    if kind == "dual":
        return 2 * (grid.ny + 1), grid.nx + 1
    raise FieldFormatError(f"unknown field kind {kind!r}")


def write_array(path: PathLike, grid: StructuredGrid, kind: str, flat: np.ndarray) -> None:
    rows, cols = _rows_for(kind, grid)
    data = np.asarray(flat, dtype=float).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise FieldFormatError(f"refusing to write non-finite values to {path}")
    lines = [f"# grid {grid.nx} {grid.ny} {kind}"]
    lines += [",".join(f"{v:.17g}" for v in row) for row in data]
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_array(path: PathLike, grid: Optional[StructuredGrid] = None):
    """Read a field file; returns (grid, kind, flat values)."""
    try:
        with open(path) as fh:
            text = fh.read().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if not text or not text[0].startswith("#"):
        raise FieldFormatError(f"{path}: missing '# grid nx ny kind' header")
    head = text[0].lstrip("#").split()
    if len(head) != 4 or head[0] != "grid":
        raise FieldFormatError(f"{path}: malformed header {text[0]!r}")
    try:
        nx, ny = int(head[1]), int(head[2])
    except ValueError as exc:
        raise FieldFormatError(f"{path}: malformed header {text[0]!r}") from exc
    kind = head[3]
    if grid is None:
        grid = build_grid(nx, ny)
    elif (nx, ny) != (grid.nx, grid.ny):
        raise GridMismatchError(f"{path}: file grid {nx}x{ny} does not match {grid.nx}x{grid.ny}")
    rows, cols = _rows_for(kind, grid)
    body = [line for line in text[1:] if line.strip()]
    if len(body) != rows:
        raise GridMismatchError(f"{path}: expected {rows} rows for a {kind} field, found {len(body)}")
    out = np.empty((rows, cols))
    for r, line in enumerate(body):
        tokens = line.split(",")
        if len(tokens) != cols:
            raise GridMismatchError(f"{path}: row {r + 1} has {len(tokens)} values, expected {cols}")
        try:
            out[r] = [float(t) for t in tokens]
        except ValueError as exc:
            raise FieldFormatError(f"{path}: unparseable value in row {r + 1}") from exc
    if not np.all(np.isfinite(out)):
        raise FieldFormatError(f"{path}: non-finite entries")
    return grid, kind, out.reshape(-1)


def store_field(field_obj, path: PathLike) -> None:
    if isinstance(field_obj, ScalarCellField):
        write_array(path, field_obj.grid, "cell", field_obj.values)
    elif isinstance(field_obj, TensorCellField):
        write_array(path, field_obj.grid, "tensor", field_obj.entries)
    elif isinstance(field_obj, NodalField):
        write_array(path, field_obj.grid, "node", field_obj.values)
    else:
        raise TypeError(f"cannot store {type(field_obj).__name__}")


def load_field(path: PathLike, grid: Optional[StructuredGrid] = None):
    grid, kind, flat = read_array(path, grid)
    if kind == "cell":
        return ScalarCellField(grid, flat)
    if kind == "tensor":
        return TensorCellField(grid, flat.reshape(-1, 3))
    if kind == "node":
        return NodalField(grid, flat)
    raise FieldFormatError(f"{path}: kind {kind!r} is not a single field (use load_time_series)")


# --- time series --------------------------------------------------------------------


def store_time_series(snapshots, path: PathLike, grid: Optional[StructuredGrid] = None,
                      tau: Optional[float] = None) -> None:
    """Write snapshots 1..N into directory ``path`` plus an ``index.csv``.

    ``snapshots`` is a DualTrajectory (step 0 is the zero initial state and is
    not written) or a sequence of nodal arrays for t = tau, 2 tau, ...
    """
    if hasattr(snapshots, "u1") and hasattr(snapshots, "u2"):
        grid, tau = snapshots.grid, snapshots.tau
        frames = [np.concatenate([snapshots.u1[k], snapshots.u2[k]])
                  for k in range(1, snapshots.n_steps + 1)]
        kind = "dual"
    else:
        if grid is None or tau is None:
            raise ValueError("grid and tau are required for plain snapshot lists")
        frames = [np.asarray(s, dtype=float) for s in snapshots]
        kind = "node"
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    lines = [f"# grid {grid.nx} {grid.ny} {kind}", "step,t,file"]
    for k, frame in enumerate(frames, start=1):
        name = f"snapshot_{k:05d}.csv"
        write_array(out / name, grid, kind, frame)
        lines.append(f"{k},{k * tau:.17g},{name}")
    with open(out / "index.csv", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(out / "meta.json", "w") as fh:
        json.dump({"nx": grid.nx, "ny": grid.ny, "kind": kind, "tau": tau, "steps": len(frames)},
                  fh, indent=2, sort_keys=True)


def load_time_series(path: PathLike, grid: Optional[StructuredGrid] = None):
    """Inverse of :func:`store_time_series`.

    Returns ``(grid, tau, kind, frames)`` with ``frames`` shaped (N, n) for
    ``node`` series and (N, 2, n) for ``dual`` series.
    """
    root = Path(path)
    with open(root / "meta.json") as fh:
        meta = json.load(fh)
    if grid is None:
        grid = build_grid(meta["nx"], meta["ny"])
    elif (meta["nx"], meta["ny"]) != (grid.nx, grid.ny):
        raise GridMismatchError(f"{root}: series grid does not match")
    with open(root / "index.csv") as fh:
        rows = [line.split(",") for line in fh.read().splitlines()[2:] if line.strip()]
    frames = []
    for step, _, name in rows:
        _, kind, flat = read_array(root / name, grid)
        frames.append(flat.reshape(2, -1) if kind == "dual" else flat)
    n = grid.node_count
    empty_shape = (0, 2, n) if meta["kind"] == "dual" else (0, n)
    arr = np.array(frames) if frames else np.zeros(empty_shape)
    return grid, float(meta["tau"]), meta["kind"], arr


def channel_fraction(field_obj: ScalarCellField, spec: ChannelSpec) -> float:
    return float(np.mean(field_obj.values == spec.channel))


def stroke_area(stroke: Stroke) -> float:
    """Area of a capsule-shaped stroke (segment swept by a disc of diameter width)."""
    length = math.hypot(stroke.x1 - stroke.x0, stroke.y1 - stroke.y0)
    return length * stroke.width + math.pi * (stroke.width / 2) ** 2
