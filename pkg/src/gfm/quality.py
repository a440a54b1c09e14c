"""Offline window scan of quality masks and the JSONL index of good sub-regions."""

from __future__ import annotations

import datetime as dt
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError
from .raster import ADJACENT, CLOUD, NODATA, SHADOW, QualityMask


@dataclass(frozen=True)
class ChipIndexEntry:
    tile_code: str
    timestamps: tuple
    x: int
    y: int
    window: tuple = (224, 224)

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        if self.x < 0 or self.y < 0:
            raise ValueError(f"negative window origin ({self.x}, {self.y})")
        if not self.timestamps:
            raise ValueError("entry needs at least one timestamp")
        days = [dt.date.fromisoformat(t) for t in self.timestamps]
        if any(a >= b for a, b in zip(days, days[1:])):
            raise ValueError(f"timestamps not strictly increasing: {self.timestamps}")

    def to_json(self) -> str:
        return json.dumps({"tile": self.tile_code, "timestamps": list(self.timestamps),
                           "x": self.x, "y": self.y, "window": list(self.window)})

    @property
    def sort_key(self):
        return (self.tile_code, self.y, self.x, self.timestamps)


@dataclass(frozen=True)
class FilterPolicy:
    window: tuple = (224, 224)
    bad_fraction_threshold: float = 0.05
    bad_codes: frozenset = field(default_factory=lambda: frozenset({CLOUD, SHADOW, ADJACENT, NODATA}))
    timesteps_required: int = 3

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(v) for v in self.window))
        object.__setattr__(self, "bad_codes", frozenset(self.bad_codes))
        if not 0.0 <= self.bad_fraction_threshold <= 1.0:
            raise ValueError("bad_fraction_threshold must lie in [0, 1]")
        if min(self.window) < 1:
            raise ValueError("window dims must be >= 1")
        if self.timesteps_required < 1:
            raise ValueError("timesteps_required must be >= 1")


def scan_windows(mask: QualityMask, policy: FilterPolicy):
    """Bad-pixel fraction of every full, non-overlapping window, row-major from (0, 0)."""
    X, Y = policy.window
    H, W = mask.codes.shape
    ny, nx = H // Y, W // X
    if nx == 0 or ny == 0:
        return []
    bad = np.isin(mask.codes[:ny * Y, :nx * X], list(policy.bad_codes))
    counts = bad.reshape(ny, Y, nx, X).sum(axis=(1, 3))
    frac = counts / float(X * Y)
    return [((i * X, j * Y), float(frac[j, i])) for j in range(ny) for i in range(nx)]


def filter_tile(masks, policy: FilterPolicy, tile_code: str | None = None):
    """Index every run of `timesteps_required` consecutive clean timestamps per window."""
    k = policy.timesteps_required
    if len(masks) < k:
        return []
    masks = sorted(masks, key=lambda m: dt.date.fromisoformat(m.timestamp))
    shape = masks[0].codes.shape
    for m in masks:
        if m.codes.shape != shape:
            raise ShapeError(f"inconsistent mask dims {m.codes.shape} vs {shape}")
    stamps = [m.timestamp for m in masks]
    if len(set(stamps)) != len(stamps):
        raise ValueError("duplicate timestamps among masks")
    if tile_code is None:
        origin = masks[0].origin
        if origin is None:
            raise ValueError("tile_code required when masks carry no origin")
        tile_code = origin.tile.tile_code
    scans = [scan_windows(m, policy) for m in masks]
    entries = []
    for w, ((x, y), _) in enumerate(scans[0]):
        ok = [s[w][1] <= policy.bad_fraction_threshold for s in scans]
        for start in range(len(masks) - k + 1):
            if all(ok[start:start + k]):
                entries.append(ChipIndexEntry(tile_code, stamps[start:start + k], x, y, policy.window))
    entries.sort(key=lambda e: (e.y, e.x, e.timestamps[0]))
    return entries


def filter_tiles(tile_masks: dict, policy: FilterPolicy, workers: int = 1):
    """Run `filter_tile` over {tile_code: masks} and merge deterministically."""
    items = sorted(tile_masks.items())
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda kv: filter_tile(kv[1], policy, kv[0]), items))
    merged = [e for r in results for e in r]
    merged.sort(key=lambda e: e.sort_key)
    return merged


def write_index(entries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(e.to_json() + "\n")


def read_index(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(ChipIndexEntry(obj["tile"], obj["timestamps"], int(obj["x"]),
                                          int(obj["y"]), tuple(obj["window"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed index entry: {exc}", line=lineno) from None
    return out
