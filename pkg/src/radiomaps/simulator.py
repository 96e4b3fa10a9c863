"""Chessboard simulation: heteroscedastic ground-truth fields and sampled fingerprints.

Each simulated AP is an isotropic source whose mean follows a log
path-loss curve and whose variance follows a squared-cosine profile of
the distance to the source, so uncertainty is highest at the source and
rings outward. Fingerprints are drawn independently per cell center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, FingerprintRecord, GridSpec, Position, RadioMap
from .errors import InputError

__all__ = [
    "ChessboardConfig",
    "TruthField",
    "true_mean",
    "true_variance",
    "sample_chessboard",
    "default_ap_positions",
]


def true_mean(g: Position, ap: Position, base: float = 50.0, natural_log: bool = False) -> float:
    """Mean RSSI at grid position g from a source at ap.

    Flat at ``base`` within unit distance of the source, then falls off
    as 10*log(10*distance). Base-10 logarithm by default to match the dB
    path-loss convention; ``natural_log`` switches to ln.
    """
    d = g.distance_to(ap)
    if d <= 1.0:
        return base
    log = math.log if natural_log else math.log10
    return base - 10.0 * log(10.0 * d)


def true_variance(g: Position, ap: Position, scale: float = 10.0, floor: float = 1e-3) -> float:
    """Variance of RSSI at g: scale * cos^2(distance / pi), floored away from zero."""
    if not scale > 0:
        raise InputError(f"scale must be positive, got {scale}")
    if not floor > 0:
        raise InputError(f"floor must be positive, got {floor}")
    d = g.distance_to(ap)
    return max(scale * math.cos(d / math.pi) ** 2, floor)


def default_ap_positions(grid: GridSpec) -> tuple[Position, ...]:
    """Center cell plus the four corner cells; index 0 is the center."""
    half = grid.cell_size / 2.0
    x0, y0 = grid.origin.x, grid.origin.y
    x1 = x0 + grid.cols * grid.cell_size
    y1 = y0 + grid.rows * grid.cell_size
    return (
        Position((x0 + x1) / 2.0, (y0 + y1) / 2.0),
        Position(x0 + half, y0 + half),
        Position(x1 - half, y0 + half),
        Position(x0 + half, y1 - half),
        Position(x1 - half, y1 - half),
    )


@dataclass(frozen=True)
class ChessboardConfig:
    """Simulation settings; defaults reproduce the 9x9, 5-AP benchmark."""

    rows: int = 9
    cols: int = 9
    ap_positions: tuple[Position, ...] | None = None  # None -> center + four corners
    train_per_grid: int = 10
    test_per_grid: int = 1
    base_power: float = 50.0
    variance_scale: float = 10.0
    variance_floor: float = 1e-3
    natural_log: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.train_per_grid < 1 or self.test_per_grid < 1:
            raise InputError("per-grid fingerprint counts must be positive")

    def grid(self) -> GridSpec:
        return GridSpec(rows=self.rows, cols=self.cols)

    def aps(self) -> tuple[Position, ...]:
        if self.ap_positions is not None:
            if not self.ap_positions:
                raise InputError("ap_positions must be non-empty")
            return tuple(self.ap_positions)
        return default_ap_positions(self.grid())


@dataclass(frozen=True)
class TruthField:
    """Analytic per-AP mean and variance at every cell, row-major."""

    grid: GridSpec
    means: dict[str, np.ndarray]
    variances: dict[str, np.ndarray]

    def to_radiomap(self) -> RadioMap:
        return RadioMap(grid=self.grid, means=dict(self.means), variances=dict(self.variances))


def truth_field(config: ChessboardConfig) -> TruthField:
    """Evaluate the analytic mean/variance fields at every cell center."""
    grid = config.grid()
    centers = grid.cell_centers()
    means: dict[str, np.ndarray] = {}
    variances: dict[str, np.ndarray] = {}
    for k, ap in enumerate(config.aps()):
        ap_id = f"ap{k}"
        means[ap_id] = np.array(
            [true_mean(Position(*c), ap, config.base_power, config.natural_log) for c in centers]
        )
        variances[ap_id] = np.array(
            [true_variance(Position(*c), ap, config.variance_scale, config.variance_floor) for c in centers]
        )
    return TruthField(grid=grid, means=means, variances=variances)


def sample_chessboard(config: ChessboardConfig = ChessboardConfig()) -> tuple[TruthField, Dataset, Dataset]:
    """Draw train and test fingerprint datasets from the truth field.

    Every cell contributes ``train_per_grid`` training records and
    ``test_per_grid`` test records at its center, each reading all APs.
    Deterministic for a fixed seed.
    """
    truth = truth_field(config)
    grid = truth.grid
    centers = grid.cell_centers()
    ap_ids = sorted(truth.means)
    rng = np.random.default_rng(config.seed)

    def draw(per_grid: int) -> Dataset:
        records = []
        for i, center in enumerate(centers):
            pos = Position(*center)
            for _ in range(per_grid):
                obs = {}
                for ap_id in ap_ids:
                    mu = truth.means[ap_id][i]
                    sigma = math.sqrt(truth.variances[ap_id][i])
                    obs[ap_id] = float(rng.normal(mu, sigma))
                records.append(FingerprintRecord(pos=pos, obs=obs))
        return Dataset.from_records(records)

    train = draw(config.train_per_grid)
    test = draw(config.test_per_grid)
    return truth, train, test
