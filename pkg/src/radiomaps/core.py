"""Domain types for fingerprints, grids, and radio maps, plus serialization.

Fingerprint datasets travel as JSON-Lines (one record per line, keys
``x``, ``y``, ``obs``); radio maps as a single JSON document. All types
are immutable values after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

import numpy as np

from .errors import InputError, ParseError

__all__ = [
    "Position",
    "GridSpec",
    "FingerprintRecord",
    "Dataset",
    "RadioMap",
    "parse_dataset",
    "serialize_dataset",
    "cell_center",
    "group_by_position",
]


def _require_finite(value: float, what: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InputError(f"{what} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class Position:
    """A 2-D location in grid units or meters."""

    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", _require_finite(self.x, "x"))
        object.__setattr__(self, "y", _require_finite(self.y, "y"))

    def distance_to(self, other: "Position") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class GridSpec:
    """A rows x cols chessboard; ``origin`` is the minimum-coordinate corner.

    Cell centers sit at half-cell offsets from the origin and are
    enumerated in row-major order (row * cols + col).
    """

    rows: int
    cols: int
    origin: Position = field(default_factory=lambda: Position(0.0, 0.0))
    cell_size: float = 1.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InputError(f"grid must have at least one row and column, got {self.rows}x{self.cols}")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise InputError(f"cell_size must be positive and finite, got {self.cell_size}")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_centers(self) -> np.ndarray:
        """All cell centers as an (rows*cols, 2) array, row-major."""
        cols = (np.arange(self.cols) + 0.5) * self.cell_size + self.origin.x
        rows = (np.arange(self.rows) + 0.5) * self.cell_size + self.origin.y
        xx, yy = np.meshgrid(cols, rows)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def cell_index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise InputError(f"cell ({row}, {col}) out of range for {self.rows}x{self.cols} grid")
        return row * self.cols + col


def cell_center(grid: GridSpec, row: int, col: int) -> Position:
    """Center of cell (row, col); raises on out-of-range indices."""
    grid.cell_index(row, col)
    return Position(
        grid.origin.x + (col + 0.5) * grid.cell_size,
        grid.origin.y + (row + 0.5) * grid.cell_size,
    )


@dataclass(frozen=True)
class FingerprintRecord:
    """One surveyed fingerprint: a location tag plus per-AP RSSI readings.

    An AP absent from ``obs`` was not heard at this position; missing
    readings are never encoded as sentinel values.
    """

    pos: Position
    obs: Mapping[str, float]

    def __post_init__(self):
        if not self.obs:
            raise InputError("fingerprint observation map must be non-empty")
        clean = {}
        for ap_id, rssi in self.obs.items():
            clean[str(ap_id)] = _require_finite(rssi, f"rssi for AP {ap_id!r}")
        object.__setattr__(self, "obs", clean)


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of fingerprints and the APs heard in them."""

    records: tuple[FingerprintRecord, ...]
    ap_ids: tuple[str, ...]

    @classmethod
    def from_records(cls, records: Iterable[FingerprintRecord]) -> "Dataset":
        records = tuple(records)
        ap_ids = sorted({ap for rec in records for ap in rec.obs})
        return cls(records=records, ap_ids=tuple(ap_ids))

    def __post_init__(self):
        seen = sorted({ap for rec in self.records for ap in rec.obs})
        if list(self.ap_ids) != seen:
            raise InputError("ap_ids must equal the union of observation keys")

    def __len__(self) -> int:
        return len(self.records)

    def observations_for(self, ap_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Positions (n, 2) and RSSI values (n,) of records that heard ``ap_id``."""
        if ap_id not in self.ap_ids:
            raise InputError(f"unknown AP id {ap_id!r}")
        xy = [(r.pos.x, r.pos.y) for r in self.records if ap_id in r.obs]
        ys = [r.obs[ap_id] for r in self.records if ap_id in r.obs]
        return np.array(xy, dtype=float).reshape(len(ys), 2), np.array(ys, dtype=float)


def parse_dataset(stream: IO[str] | str) -> Dataset:
    """Parse fingerprint-JSONL into a Dataset.

    Each non-empty line must be a JSON object with numeric ``x``, ``y``
    and a non-empty ``obs`` object mapping AP ids to numbers. Errors
    name the 1-based line number.
    """
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = stream.read().splitlines()
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise ParseError(f"line {lineno}: expected a JSON object")
        try:
            x, y = doc["x"], doc["y"]
            obs = doc["obs"]
        except KeyError as exc:
            raise ParseError(f"line {lineno}: missing key {exc.args[0]!r}") from exc
        if not isinstance(x, (int, float)) or not isinstance(y, (int, float)) or isinstance(x, bool) or isinstance(y, bool):
            raise ParseError(f"line {lineno}: x and y must be numbers")
        if not isinstance(obs, dict):
            raise ParseError(f"line {lineno}: obs must be an object")
        for ap_id, rssi in obs.items():
            if not isinstance(rssi, (int, float)) or isinstance(rssi, bool):
                raise ParseError(f"line {lineno}: rssi for AP {ap_id!r} must be a number")
        try:
            records.append(FingerprintRecord(pos=Position(x, y), obs=obs))
        except InputError as exc:
            raise InputError(f"line {lineno}: {exc}") from exc
    return Dataset.from_records(records)


def serialize_dataset(dataset: Dataset) -> str:
    """Dataset back to fingerprint-JSONL; inverse of parse_dataset."""
    lines = []
    for rec in dataset.records:
        doc = {"x": rec.pos.x, "y": rec.pos.y, "obs": {k: rec.obs[k] for k in sorted(rec.obs)}}
        lines.append(json.dumps(doc))
    return "\n".join(lines) + ("\n" if lines else "")


def group_by_position(
    dataset: Dataset, ap_id: str, tol: float = 0.0
) -> list[tuple[Position, list[float]]]:
    """Group one AP's readings by survey position.

    Records within Euclidean distance ``tol`` of a group's representative
    (the first position seen for the group) are merged. Only records that
    heard ``ap_id`` contribute; empty groups are dropped. With the default
    tol=0 this partitions by exact position equality.
    """
    if tol < 0:
        raise InputError(f"tol must be nonnegative, got {tol}")
    if ap_id not in dataset.ap_ids:
        raise InputError(f"unknown AP id {ap_id!r}")
    reps: list[Position] = []
    groups: list[list[float]] = []
    for rec in dataset.records:
        if ap_id not in rec.obs:
            continue
        for rep, group in zip(reps, groups):
            if rec.pos.distance_to(rep) <= tol:
                group.append(rec.obs[ap_id])
                break
        else:
            reps.append(rec.pos)
            groups.append([rec.obs[ap_id]])
    return list(zip(reps, groups))


@dataclass(frozen=True)
class RadioMap:
    """Per-AP predictive Gaussians (mean, variance) over a grid.

    Arrays are row-major over cells and have length ``grid.n_cells``;
    variances are strictly positive (producers floor them). Optional
    per-AP hyperparameters ride along for provenance.
    """

    grid: GridSpec
    means: Mapping[str, np.ndarray]
    variances: Mapping[str, np.ndarray]
    hyperparams: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.n_cells
        means = {}
        variances = {}
        for ap_id in self.means:
            m = np.asarray(self.means[ap_id], dtype=float)
            v = np.asarray(self.variances.get(ap_id, []), dtype=float)
            if m.shape != (n,) or v.shape != (n,):
                raise InputError(f"AP {ap_id!r}: mean/variance arrays must have length {n}")
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
                raise InputError(f"AP {ap_id!r}: non-finite radio map values")
            if np.any(v <= 0):
                raise InputError(f"AP {ap_id!r}: variances must be positive")
            m.setflags(write=False)
            v.setflags(write=False)
            means[ap_id] = m
            variances[ap_id] = v
        if set(self.variances) != set(means):
            raise InputError("means and variances must cover the same APs")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def ap_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.means))

    def to_json(self) -> str:
        doc = {
            "grid": {
                "rows": self.grid.rows,
                "cols": self.grid.cols,
                "origin": [self.grid.origin.x, self.grid.origin.y],
                "cell_size": self.grid.cell_size,
            },
            "aps": {},
        }
        for ap_id in self.ap_ids:
            entry = {
                "mean": self.means[ap_id].tolist(),
                "variance": self.variances[ap_id].tolist(),
            }
            if ap_id in self.hyperparams:
                entry["hyperparams"] = dict(self.hyperparams[ap_id])
            doc["aps"][ap_id] = entry
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RadioMap":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid radio map JSON ({exc.msg})") from exc
        try:
            g = doc["grid"]
            grid = GridSpec(
                rows=int(g["rows"]),
                cols=int(g["cols"]),
                origin=Position(*g["origin"]),
                cell_size=float(g["cell_size"]),
            )
            aps = doc["aps"]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"radio map JSON missing required structure: {exc}") from exc
        means = {ap: np.array(entry["mean"], dtype=float) for ap, entry in aps.items()}
        variances = {ap: np.array(entry["variance"], dtype=float) for ap, entry in aps.items()}
        hyper = {ap: entry["hyperparams"] for ap, entry in aps.items() if "hyperparams" in entry}
        return cls(grid=grid, means=means, variances=variances, hyperparams=hyper)
