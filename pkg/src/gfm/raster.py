"""Raster chip types, the binary chip container, band statistics and a
synthetic tile generator used in place of real HLS scenes."""

from __future__ import annotations

import datetime as dt
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptionError, EmptyInputError, FormatError, ShapeError

DEFAULT_BANDS = ("B02", "B03", "B04", "B05", "B06", "B07")

CLEAR, CLOUD, SHADOW, ADJACENT, NODATA = 0, 1, 2, 3, 255
QUALITY_CODES = frozenset({CLEAR, CLOUD, SHADOW, ADJACENT, NODATA})

MAGIC = b"GFMC"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<u2"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR_DTYPE = {v.str: k for k, v in DTYPE_CODES.items()}

STD_EPS = 1e-6


@dataclass(frozen=True)
class TileId:
    utm_zone: int
    lat_band: str
    tile_code: str

    def __post_init__(self):
        if not self.tile_code:
            raise ValueError("tile_code must be non-empty")
        if not 1 <= int(self.utm_zone) <= 60:
            raise ValueError(f"utm_zone {self.utm_zone} outside [1, 60]")
        if len(self.lat_band) != 1 or not self.lat_band.isalpha():
            raise ValueError(f"lat_band must be a single letter, got {self.lat_band!r}")


@dataclass(frozen=True)
class Origin:
    tile: TileId
    x: int = 0
    y: int = 0


def _check_timestamps(timestamps):
    parsed = [dt.date.fromisoformat(t) for t in timestamps]
    for a, b in zip(parsed, parsed[1:]):
        if not a < b:
            raise ValueError(f"timestamps must be strictly increasing: {timestamps}")


@dataclass(frozen=True, eq=False)
class RasterChip:
    """A (T, C, H, W) block of reflectance values plus metadata."""

    data: np.ndarray
    band_names: tuple = DEFAULT_BANDS
    timestamps: tuple = ("2022-01-01",)
    origin: Origin | None = None
    nodata_value: float | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"chip data must be 4-D (T, C, H, W), got shape {data.shape}")
        T, C = data.shape[:2]
        if T < 1 or C < 1:
            raise ShapeError(f"chip needs T >= 1 and C >= 1, got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "band_names", tuple(self.band_names))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if len(self.band_names) != C:
            raise ShapeError(f"{len(self.band_names)} band names for {C} bands")
        if len(self.timestamps) != T:
            raise ShapeError(f"{len(self.timestamps)} timestamps for {T} timesteps")
        _check_timestamps(self.timestamps)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, RasterChip):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data, equal_nan=self.data.dtype.kind == "f")
            and self.band_names == other.band_names
            and self.timestamps == other.timestamps
            and self.origin == other.origin
            and _same_nodata(self.nodata_value, other.nodata_value)
        )

    def window(self, x: int, y: int, width: int, height: int, timestamps=None) -> "RasterChip":
        """Cut a spatial window, optionally restricted to a subset of timestamps."""
        if timestamps is None:
            t_idx = list(range(len(self.timestamps)))
        else:
            lookup = {t: i for i, t in enumerate(self.timestamps)}
            try:
                t_idx = [lookup[t] for t in timestamps]
            except KeyError as exc:
                raise ShapeError(f"timestamp {exc.args[0]} not in chip") from None
        H, W = self.data.shape[2:]
        if x < 0 or y < 0 or x + width > W or y + height > H:
            raise ShapeError(f"window ({x},{y},{width},{height}) outside {W}x{H} chip")
        data = np.ascontiguousarray(self.data[t_idx, :, y:y + height, x:x + width])
        tile = self.origin.tile if self.origin else None
        ox = (self.origin.x if self.origin else 0) + x
        oy = (self.origin.y if self.origin else 0) + y
        return RasterChip(
            data=data,
            band_names=self.band_names,
            timestamps=tuple(self.timestamps[i] for i in t_idx),
            origin=Origin(tile, ox, oy) if tile else None,
            nodata_value=self.nodata_value,
        )


def _same_nodata(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a == b or (np.isnan(a) and np.isnan(b))


@dataclass(frozen=True, eq=False)
class QualityMask:
    """Per-pixel quality categories for one timestep."""

    codes: np.ndarray
    timestamp: str = "2022-01-01"
    origin: Origin | None = None

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2:
            raise ShapeError(f"quality mask must be 2-D, got shape {codes.shape}")
        codes = codes.astype(np.uint8, copy=False)
        bad = np.setdiff1d(np.unique(codes), sorted(QUALITY_CODES))
        if bad.size:
            raise ValueError(f"unknown quality codes {bad.tolist()}")
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self):
        return self.codes.shape

    def __eq__(self, other):
        if not isinstance(other, QualityMask):
            return NotImplemented
        return (
            np.array_equal(self.codes, other.codes)
            and self.timestamp == other.timestamp
            and self.origin == other.origin
        )


@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray
    pixel_count: int

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("mean and std must be 1-D arrays of equal length")
        if np.any(self.std < 0):
            raise ValueError("std must be non-negative")
        if self.pixel_count <= 0:
            raise ValueError("pixel_count must be positive")

    @property
    def band_count(self):
        return self.mean.shape[0]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "pixel_count": int(self.pixel_count)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]), int(d["pixel_count"]))


# ---------------------------------------------------------------------------
# chip container

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("header truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad UTF-8 in header: {exc}") from None


def _encode(data: np.ndarray, band_names, timestamps, origin, nodata) -> bytes:
    dtype = data.dtype.newbyteorder("<") if data.dtype.itemsize > 1 else data.dtype
    code = _CODE_FOR_DTYPE.get(np.dtype(dtype).str)
    if code is None:
        raise FormatError(f"unsupported chip dtype {data.dtype}")
    T, C, H, W = data.shape
    parts = [MAGIC, struct.pack("<HB4I", VERSION, code, T, C, H, W)]
    parts += [_pack_str(b) for b in band_names]
    parts += [_pack_str(t) for t in timestamps]
    if origin is None:
        parts.append(b"\x00")
    else:
        t = origin.tile
        parts.append(b"\x01" + struct.pack("<B", t.utm_zone) + _pack_str(t.lat_band)
                     + _pack_str(t.tile_code) + struct.pack("<II", origin.x, origin.y))
    if nodata is None:
        parts.append(b"\x00" + struct.pack("<d", 0.0))
    else:
        parts.append(b"\x01" + struct.pack("<d", float(nodata)))
    parts.append(np.ascontiguousarray(data, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def _decode(buf: bytes):
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic bytes, not a chip file")
    version, code, T, C, H, W = r.unpack("<HB4I")
    if version != VERSION:
        raise FormatError(f"unsupported chip version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    bands = tuple(r.string() for _ in range(C))
    stamps = tuple(r.string() for _ in range(T))
    (has_origin,) = r.unpack("<B")
    origin = None
    if has_origin:
        (zone,) = r.unpack("<B")
        lat = r.string()
        tile_code = r.string()
        x, y = r.unpack("<II")
        origin = Origin(TileId(zone, lat, tile_code), x, y)
    has_nodata, nodata = r.unpack("<Bd")
    dtype = DTYPE_CODES[code]
    nbytes = T * C * H * W * dtype.itemsize
    payload = buf[r.pos:]
    if len(payload) < nbytes:
        raise CorruptionError(f"payload truncated: expected {nbytes} bytes, found {len(payload)}")
    if len(payload) > nbytes:
        raise CorruptionError(f"{len(payload) - nbytes} trailing bytes after payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(T, C, H, W).copy()
    return code, data, bands, stamps, origin, (nodata if has_nodata else None)


def write_chip(chip: RasterChip, path) -> None:
    Path(path).write_bytes(
        _encode(chip.data, chip.band_names, chip.timestamps, chip.origin, chip.nodata_value))


def read_chip(path) -> RasterChip:
    code, data, bands, stamps, origin, nodata = _decode(Path(path).read_bytes())
    if code == 2:
        raise FormatError(f"{path} holds a quality mask, not a chip")
    return RasterChip(data, bands, stamps, origin, nodata)


def write_quality_mask(mask: QualityMask, path) -> None:
    data = mask.codes[None, None]
    Path(path).write_bytes(_encode(data, ("FMASK",), (mask.timestamp,), mask.origin, None))


def read_quality_mask(path) -> QualityMask:
    code, data, _, stamps, origin, _ = _decode(Path(path).read_bytes())
    if code != 2 or data.shape[:2] != (1, 1):
        raise FormatError(f"{path} is not a quality mask file")
    return QualityMask(data[0, 0], stamps[0], origin)


def write_label_map(labels: np.ndarray, path, origin: Origin | None = None) -> None:
    """Label maps reuse the container as a single-band u8 chip."""
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(_encode(labels[None, None], ("LABEL",), ("1970-01-01",), origin, None))


def read_label_map(path) -> np.ndarray:
    code, data, *_ = _decode(Path(path).read_bytes())
    if code != 2:
        raise FormatError(f"{path} is not a u8 label map")
    return data[0, 0]


# ---------------------------------------------------------------------------
# statistics

def _valid_mask(chip: RasterChip, quality) -> np.ndarray:
    data = chip.data
    valid = np.ones((data.shape[0],) + data.shape[2:], dtype=bool)
    if chip.nodata_value is not None:
        nd = chip.nodata_value
        hit = np.isnan(data) if np.isnan(nd) else data == nd
        valid &= ~hit.any(axis=1)
    if data.dtype.kind == "f":
        valid &= np.isfinite(data).all(axis=1)
    if quality is not None:
        if isinstance(quality, np.ndarray):
            codes = quality
        else:
            codes = np.stack([q.codes for q in quality])
        if codes.ndim == 2:
            codes = codes[None]
        if codes.shape != valid.shape:
            raise ShapeError(f"quality codes {codes.shape} not aligned with chip {data.shape}")
        valid &= codes == CLEAR
    return valid


def compute_band_stats(chips: Iterable[RasterChip], quality: Iterable | None = None) -> BandStats:
    """Streaming per-band mean/std over valid pixels.

    Each chip contributes its own exact mean and centred sum of squares, which
    are folded into the running totals with Chan's pairwise update.
    """
    quality_iter = iter(quality) if quality is not None else None
    n = 0
    mean = m2 = None
    for chip in chips:
        q = next(quality_iter) if quality_iter is not None else None
        valid = _valid_mask(chip, q)
        k = int(valid.sum())
        if mean is None:
            mean = np.zeros(chip.data.shape[1])
            m2 = np.zeros(chip.data.shape[1])
        elif chip.data.shape[1] != mean.shape[0]:
            raise ShapeError(f"band count {chip.data.shape[1]} differs from {mean.shape[0]}")
        if k == 0:
            continue
        # (C, k) view of valid pixels
        px = np.moveaxis(chip.data, 1, 0)[:, valid].astype(np.float64)
        b_mean = px.mean(axis=1)
        b_m2 = ((px - b_mean[:, None]) ** 2).sum(axis=1)
        tot = n + k
        delta = b_mean - mean
        mean = mean + delta * (k / tot)
        m2 = m2 + b_m2 + delta ** 2 * (n * k / tot)
        n = tot
    if n == 0:
        raise EmptyInputError("no valid pixels to compute band statistics from")
    return BandStats(mean, np.sqrt(m2 / n), n)


def standardize(chip: RasterChip, stats: BandStats, dtype=np.float32) -> RasterChip:
    C = chip.data.shape[1]
    if stats.band_count != C:
        raise ShapeError(f"stats have {stats.band_count} bands, chip has {C}")
    mean = stats.mean.reshape(1, C, 1, 1)
    scale = np.maximum(stats.std, STD_EPS).reshape(1, C, 1, 1)
    out = ((chip.data.astype(np.float64) - mean) / scale).astype(dtype)
    return RasterChip(out, chip.band_names, chip.timestamps, chip.origin, None)


def unstandardize(data: np.ndarray, stats: BandStats) -> np.ndarray:
    """Inverse of `standardize` for a raw (..., C, H, W) array."""
    C = stats.band_count
    shape = (1,) * (data.ndim - 3) + (C, 1, 1)
    scale = np.maximum(stats.std, STD_EPS).reshape(shape)
    return data.astype(np.float64) * scale + stats.mean.reshape(shape)


def standardize_array(data: np.ndarray, stats: BandStats, dtype=np.float32) -> np.ndarray:
    """Vectorised `standardize` for a (..., C, H, W) batch."""
    C = stats.band_count
    if data.shape[-3] != C:
        raise ShapeError(f"stats have {C} bands, data shape is {data.shape}")
    shape = (1,) * (data.ndim - 3) + (C, 1, 1)
    scale = np.maximum(stats.std, STD_EPS).reshape(shape)
    return ((data.astype(np.float64) - stats.mean.reshape(shape)) / scale).astype(dtype)


# ---------------------------------------------------------------------------
# synthetic tiles

# Per-band response to (vegetation, water, soil) latents, plus a base level.
_BAND_BASE = np.array([600.0, 900.0, 1000.0, 2400.0, 2000.0, 1300.0])
_BAND_MIX = np.array([
    [-120.0, -80.0, 250.0],
    [60.0, -120.0, 300.0],
    [-250.0, -150.0, 380.0],
    [900.0, -900.0, 300.0],
    [-200.0, -800.0, 500.0],
    [-300.0, -600.0, 450.0],
])


def _value_noise(rng, size, octaves=4, base_cells=3, persistence=0.55):
    out = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        grid = rng.standard_normal((cells + 1, cells + 1))
        pos = np.arange(size) * (cells / size)
        i0 = np.floor(pos).astype(int)
        f = pos - i0
        f = f * f * (3 - 2 * f)
        rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
        out += amp * (rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :])
        norm += amp ** 2
        amp *= persistence
    return out / np.sqrt(norm)


def _dilate(mask, radius):
    out = mask.copy()
    H, W = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius:
                continue
            src = mask[max(0, -dy):H - max(0, dy), max(0, -dx):W - max(0, dx)]
            out[max(0, dy):H - max(0, -dy), max(0, dx):W - max(0, -dx)] |= src
    return out


def _cloud_codes(rng, size, cloud_fraction, ring=2):
    codes = np.zeros((size, size), dtype=np.uint8)
    if cloud_fraction <= 0:
        return codes
    yy, xx = np.mgrid[0:size, 0:size]
    cloud = np.zeros((size, size), dtype=bool)
    total = size * size
    target = cloud_fraction * total
    covered = 0
    rmax = max(3.0, size / 10)
    while covered < target:
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(rmax / 3, rmax, 2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        blob = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        trial = cloud | blob
        trial_cov = int(_dilate(trial, ring).sum())
        if trial_cov == covered:
            continue
        if trial_cov > target and (trial_cov - target) > (target - covered) and covered > 0:
            break
        cloud, covered = trial, trial_cov
    codes[_dilate(cloud, ring)] = ADJACENT
    codes[cloud] = CLOUD
    return codes


def synthetic_tile_id(seed: int) -> TileId:
    zone = 1 + seed % 60
    lat = "CDEFGHJKLMNPQRSTUVWX"[seed % 20]
    return TileId(zone, lat, f"T{zone:02d}{lat}{seed:05d}")


def generate_synthetic_tile(seed: int, size: int = 256, t: int = 3, cloud_fraction: float = 0.0,
                            band_names: Sequence[str] = DEFAULT_BANDS,
                            start_date: str = "2022-03-01", revisit_days: int = 16):
    """Build a deterministic multi-temporal tile and its per-timestep quality masks.

    Cloud pixels are painted bright in the returned data, mirroring what a
    sensor would record; the masks mark them as cloud with an adjacent ring.
    """
    if not 0.0 <= cloud_fraction <= 1.0:
        raise ValueError(f"cloud_fraction must lie in [0, 1], got {cloud_fraction}")
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    C = len(band_names)
    if C > len(_BAND_BASE):
        raise ValueError(f"at most {len(_BAND_BASE)} bands supported")
    rng = np.random.default_rng(seed)
    veg, water, soil = (_value_noise(rng, size) for _ in range(3))
    water = np.clip(water - 0.6, 0, None) * 2.0
    start = dt.date.fromisoformat(start_date)
    tile = synthetic_tile_id(seed)
    data = np.empty((t, C, size, size), dtype=np.uint16)
    masks = []
    stamps = []
    for k in range(t):
        season = np.sin(2 * np.pi * k / max(t, 4))
        drift = 0.15 * _value_noise(rng, size, octaves=2)
        latent = np.stack([veg * (1 + 0.35 * season) + drift, water, soil - 0.2 * season])
        refl = _BAND_BASE[:C, None, None] + np.tensordot(_BAND_MIX[:C], latent, axes=1)
        refl += rng.normal(0, 15.0, size=refl.shape)
        codes = _cloud_codes(rng, size, cloud_fraction)
        cloud = codes == CLOUD
        haze = codes == ADJACENT
        if cloud.any():
            bright = 7000 + 800 * _value_noise(rng, size, octaves=2)
            refl[:, cloud] = bright[cloud]
            refl[:, haze] = 0.5 * refl[:, haze] + 0.5 * 4000
        data[k] = np.clip(np.rint(refl), 1, 10000).astype(np.uint16)
        stamp = (start + dt.timedelta(days=revisit_days * k)).isoformat()
        stamps.append(stamp)
        masks.append(QualityMask(codes, stamp, Origin(tile, 0, 0)))
    chip = RasterChip(data, tuple(band_names), tuple(stamps), Origin(tile, 0, 0), nodata_value=0)
    return chip, masks
