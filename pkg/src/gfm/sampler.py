"""Stratified tile sampling over climate-statistic groups."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import TileId, synthetic_tile_id

logger = logging.getLogger(__name__)

GRID_HEADER = ["tile_code", "utm_zone", "lat_band", "mean_value", "p99_value"]


@dataclass(frozen=True)
class ClimateGrid:
    """Populated cells, one per tile, with their two stratification statistics."""

    tiles: tuple
    mean_value: np.ndarray
    p99_value: np.ndarray
    resolution: str = "tile"

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))
        mv = np.asarray(self.mean_value, dtype=np.float64)
        pv = np.asarray(self.p99_value, dtype=np.float64)
        object.__setattr__(self, "mean_value", mv)
        object.__setattr__(self, "p99_value", pv)
        if not (len(self.tiles) == mv.shape[0] == pv.shape[0]):
            raise ValueError("tiles, mean_value and p99_value must have equal length")
        if not (np.isfinite(mv).all() and np.isfinite(pv).all()):
            raise ValueError("climate statistics must be finite")
        codes = [t.tile_code for t in self.tiles]
        if len(set(codes)) != len(codes):
            raise ValueError("duplicate tile codes in climate grid")

    def __len__(self):
        return len(self.tiles)


@dataclass(frozen=True)
class GroupAssignment:
    tiles: tuple
    group_id: np.ndarray
    n_groups: int
    g2: int
    mean_edges: np.ndarray
    p99_edges: np.ndarray

    def members(self):
        """Map group id -> list of tile indices (storage order), non-empty groups only."""
        out = {}
        for i, g in enumerate(self.group_id.tolist()):
            out.setdefault(g, []).append(i)
        return dict(sorted(out.items()))


def read_grid(path) -> ClimateGrid:
    tiles, mv, pv = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(GRID_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            tiles.append(TileId(int(row["utm_zone"]), row["lat_band"], row["tile_code"]))
            mv.append(float(row["mean_value"]))
            pv.append(float(row["p99_value"]))
    return ClimateGrid(tiles, np.array(mv), np.array(pv))


def write_grid(grid: ClimateGrid, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for t, m, p in zip(grid.tiles, grid.mean_value, grid.p99_value):
            w.writerow([t.tile_code, t.utm_zone, t.lat_band, repr(float(m)), repr(float(p))])


def _quantile_bins(values: np.ndarray, n_bins: int, name: str):
    edges = np.quantile(values, np.arange(1, n_bins) / n_bins)
    if np.unique(edges).size < edges.size or np.unique(values).size < n_bins:
        warnings.warn(f"{name}: fewer distinct values than {n_bins} bins, some bins collapse",
                      RuntimeWarning, stacklevel=3)
    # side="left": a value equal to an edge lands in the lower bin
    return np.searchsorted(edges, values, side="left"), edges


def assign_groups(grid: ClimateGrid, g1: int, g2: int) -> GroupAssignment:
    """Equal-frequency binning of each statistic; group = bin_mean * g2 + bin_p99."""
    if len(grid) == 0:
        raise ValueError("climate grid is empty")
    if g1 < 1 or g2 < 1:
        raise ValueError(f"bin counts must be >= 1, got {g1}, {g2}")
    b1, e1 = _quantile_bins(grid.mean_value, g1, "mean_value")
    b2, e2 = _quantile_bins(grid.p99_value, g2, "p99_value")
    return GroupAssignment(grid.tiles, (b1 * g2 + b2).astype(np.int64), g1 * g2, g2, e1, e2)


def allocate_quotas(sizes: dict, budget: int) -> dict:
    """Even split over groups, then round-robin shortfall to the largest groups with room."""
    groups = list(sizes)
    base, extra = divmod(budget, len(groups))
    quota = {g: base + (1 if i < extra else 0) for i, g in enumerate(groups)}
    shortfall = 0
    for g in groups:
        if quota[g] > sizes[g]:
            shortfall += quota[g] - sizes[g]
            quota[g] = sizes[g]
    if shortfall:
        by_size = sorted(groups, key=lambda g: (-sizes[g], g))
        while shortfall:
            progressed = False
            for g in by_size:
                if shortfall and quota[g] < sizes[g]:
                    quota[g] += 1
                    shortfall -= 1
                    progressed = True
            if not progressed:
                raise ValueError("budget exceeds total population")
    return quota


def stratified_sample(assignment: GroupAssignment, budget: int, seed: int) -> list:
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    members = assignment.members()
    total = sum(len(m) for m in members.values())
    if budget > total:
        raise ValueError(f"budget {budget} exceeds population {total}")
    quotas = allocate_quotas({g: len(m) for g, m in members.items()}, budget)
    out = []
    for g, idx in members.items():
        rng = np.random.default_rng([seed, g])
        picks = rng.choice(len(idx), size=quotas[g], replace=False)
        out.extend(assignment.tiles[idx[p]] for p in picks)
    logger.info("sampled %d tiles from %d groups", len(out), len(members))
    return out


def write_sample(tiles, path) -> None:
    Path(path).write_text("".join(f"{t.tile_code}\n" for t in tiles), encoding="utf-8")


def read_sample(path) -> list:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]


def synthetic_grid(n_tiles: int, seed: int) -> ClimateGrid:
    """Climate statistics for synthetic tiles whose ids follow `generate_synthetic_tile`."""
    rng = np.random.default_rng(seed)
    tiles = [synthetic_tile_id(s) for s in range(n_tiles)]
    temp = rng.normal(12.0, 6.0, n_tiles)
    precip = np.exp(rng.normal(3.0, 0.5, n_tiles))
    return ClimateGrid(tiles, temp, precip)
