"""Zarr-v2 style chunked sample store, its batch loader, and a per-band-file
baseline loader kept for file-handle comparisons."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import threading
import zlib
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, MissingSourceError, ShapeError
from .quality import ChipIndexEntry
from .raster import BandStats, Origin, RasterChip, TileId, standardize_array

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SAMPLES = 8
_ZARR_DTYPES = {"<u2": np.dtype("<u2"), "<f4": np.dtype("<f4")}


@dataclass(frozen=True)
class StoreManifest:
    sample_count: int
    sample_shape: tuple
    dtype: str
    chunk_samples: int
    provenance: tuple
    origins: tuple
    band_names: tuple
    nodata_value: float | None
    stats: BandStats | None
    checksums: tuple

    def __post_init__(self):
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")
        if self.chunk_samples < 1:
            raise ValueError("chunk_samples must be >= 1")
        if len(self.provenance) != self.sample_count:
            raise ValueError("provenance length must equal sample_count")

    @property
    def n_chunks(self):
        return math.ceil(self.sample_count / self.chunk_samples)

    def to_dict(self):
        return {
            "sample_count": self.sample_count,
            "sample_shape": list(self.sample_shape),
            "dtype": self.dtype,
            "chunk_samples": self.chunk_samples,
            "band_names": list(self.band_names),
            "nodata_value": self.nodata_value,
            "stats": self.stats.to_dict() if self.stats else None,
            "samples": [
                {"entry": json.loads(e.to_json()), "utm_zone": o[0], "lat_band": o[1], "crc32": c}
                for e, o, c in zip(self.provenance, self.origins, self.checksums)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        samples = d["samples"]
        prov = tuple(ChipIndexEntry(s["entry"]["tile"], s["entry"]["timestamps"], s["entry"]["x"],
                                    s["entry"]["y"], s["entry"]["window"]) for s in samples)
        return cls(
            sample_count=d["sample_count"],
            sample_shape=tuple(d["sample_shape"]),
            dtype=d["dtype"],
            chunk_samples=d["chunk_samples"],
            provenance=prov,
            origins=tuple((s["utm_zone"], s["lat_band"]) for s in samples),
            band_names=tuple(d["band_names"]),
            nodata_value=d["nodata_value"],
            stats=BandStats.from_dict(d["stats"]) if d["stats"] else None,
            checksums=tuple(s["crc32"] for s in samples),
        )


@dataclass(frozen=True)
class LoaderConfig:
    batch_size: int = 32
    workers: int = 1
    prefetch: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.prefetch < 0:
            raise ValueError("prefetch must be >= 0")


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _chunk_name(c: int) -> str:
    return f"{c}.0.0.0.0"


def _write_chunk(path: Path, block: np.ndarray) -> None:
    path.write_bytes(block.tobytes())


def _resolver(chip_source):
    if isinstance(chip_source, Mapping):
        return chip_source.__getitem__
    return chip_source


def pack(index, chip_source, stats: BandStats | None, out_path,
         chunk_samples: int = DEFAULT_CHUNK_SAMPLES) -> StoreManifest:
    """Cut every indexed window from its source tile and write it into the store.

    The store is assembled in a sibling temp directory and swapped in by
    rename, so readers see either the previous store or the complete new one.
    """
    if chunk_samples < 1:
        raise ValueError("chunk_samples must be >= 1")
    out_path = Path(out_path)
    resolve = _resolver(chip_source)
    index = list(index)
    tmp = out_path.parent / f".{out_path.name}.tmp-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        manifest = _pack_into(index, resolve, stats, tmp, chunk_samples)
        _swap_in(tmp, out_path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info("packed %d samples into %d chunks at %s", manifest.sample_count, manifest.n_chunks, out_path)
    return manifest


def _pack_into(index, resolve, stats, root: Path, k: int) -> StoreManifest:
    shape = None
    dtype = None
    band_names, nodata = (), None
    origins, sums = [], []
    block = None
    n = len(index)
    cache_code, cache_chip = None, None
    for i, entry in enumerate(index):
        if entry.tile_code != cache_code:
            try:
                cache_chip = resolve(entry.tile_code)
            except (KeyError, FileNotFoundError):
                raise MissingSourceError(
                    f"no source chip for entry {i} (tile {entry.tile_code}, x={entry.x}, y={entry.y})") from None
            cache_code = entry.tile_code
        X, Y = entry.window
        sample = cache_chip.window(entry.x, entry.y, X, Y, timestamps=entry.timestamps)
        if shape is None:
            shape = sample.data.shape
            dtype = sample.data.dtype.newbyteorder("<").str
            if dtype not in _ZARR_DTYPES:
                raise ShapeError(f"unsupported sample dtype {sample.data.dtype}")
            band_names, nodata = sample.band_names, cache_chip.nodata_value
        elif sample.data.shape != shape:
            raise ShapeError(f"entry {i} has sample shape {sample.data.shape}, expected {shape}")
        elif sample.band_names != band_names:
            raise ShapeError(f"entry {i} band names {sample.band_names} differ from {band_names}")
        if block is None:
            block = np.zeros((k,) + shape, dtype=_ZARR_DTYPES[dtype])
        raw = np.ascontiguousarray(sample.data, dtype=_ZARR_DTYPES[dtype])
        block[i % k] = raw
        sums.append(zlib.crc32(raw.tobytes()))
        tile = sample.origin.tile if sample.origin else None
        origins.append((tile.utm_zone, tile.lat_band) if tile else (None, None))
        if i % k == k - 1 or i == n - 1:
            if i % k != k - 1:
                block[i % k + 1:] = 0
            _write_chunk(root / _chunk_name(i // k), block)
    shape = shape or (0, 0, 0, 0)
    dtype = dtype or "<u2"
    zarray = {
        "zarr_format": 2,
        "shape": [n, *shape],
        "chunks": [k, *[max(1, s) for s in shape]],
        "dtype": dtype,
        "compressor": None,
        "fill_value": 0,
        "order": "C",
        "filters": None,
        "dimension_separator": ".",
    }
    _dump_json(zarray, root / ".zarray")
    _dump_json({"_ARRAY_DIMENSIONS": ["sample", "time", "band", "y", "x"]}, root / ".zattrs")
    manifest = StoreManifest(n, tuple(shape), dtype, k, tuple(index), tuple(origins),
                             tuple(band_names), nodata, stats, tuple(sums))
    _dump_json(manifest.to_dict(), root / "manifest.json")
    return manifest


def _swap_in(tmp: Path, out_path: Path):
    if out_path.exists():
        old = out_path.parent / f".{out_path.name}.old-{os.getpid()}"
        if old.exists():
            shutil.rmtree(old)
        os.replace(out_path, old)
        os.replace(tmp, out_path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, out_path)


class ChunkStore:
    """Read side of a packed store. Immutable, safe to share across threads."""

    def __init__(self, path):
        self.path = Path(path)
        meta = json.loads((self.path / ".zarray").read_text(encoding="utf-8"))
        if meta.get("zarr_format") != 2 or meta.get("order") != "C" or meta.get("compressor") is not None:
            raise CorruptionError(f"{self.path}: unsupported array metadata {meta}")
        self.manifest = StoreManifest.from_dict(json.loads((self.path / "manifest.json").read_text(encoding="utf-8")))
        self.dtype = _ZARR_DTYPES[meta["dtype"]]
        self._lock = threading.Lock()
        self.open_count = 0
        self._sample_bytes = int(np.prod(self.manifest.sample_shape)) * self.dtype.itemsize

    def __len__(self):
        return self.manifest.sample_count

    @property
    def sample_shape(self):
        return self.manifest.sample_shape

    def reset_counter(self):
        with self._lock:
            self.open_count = 0

    def _count_open(self):
        with self._lock:
            self.open_count += 1

    def read_chunk(self, c: int) -> np.ndarray:
        """Whole chunk as (chunk_samples, T, C, H, W); one file open."""
        self._count_open()
        with open(self.path / _chunk_name(c), "rb") as fh:
            raw = fh.read()
        k = self.manifest.chunk_samples
        if len(raw) != k * self._sample_bytes:
            raise CorruptionError(f"chunk {c} has {len(raw)} bytes, expected {k * self._sample_bytes}")
        return np.frombuffer(raw, dtype=self.dtype).reshape((k,) + self.sample_shape)

    def _check(self, i: int, arr: np.ndarray):
        if zlib.crc32(arr.tobytes()) != self.manifest.checksums[i]:
            raise CorruptionError(f"checksum mismatch for sample {i}")

    def read_array(self, i: int) -> np.ndarray:
        if not 0 <= i < len(self):
            raise IndexError(f"sample {i} out of range [0, {len(self)})")
        k = self.manifest.chunk_samples
        self._count_open()
        with open(self.path / _chunk_name(i // k), "rb") as fh:
            fh.seek((i % k) * self._sample_bytes)
            raw = fh.read(self._sample_bytes)
        if len(raw) != self._sample_bytes:
            raise CorruptionError(f"chunk {i // k} truncated")
        arr = np.frombuffer(raw, dtype=self.dtype).reshape(self.sample_shape).copy()
        self._check(i, arr)
        return arr

    def read_sample(self, i: int) -> RasterChip:
        arr = self.read_array(i)
        m = self.manifest
        entry = m.provenance[i]
        zone, lat = m.origins[i]
        origin = Origin(TileId(zone, lat, entry.tile_code), entry.x, entry.y) if zone else None
        return RasterChip(arr, m.band_names, entry.timestamps, origin, m.nodata_value)


def epoch_order(n: int, chunk_samples: int, batch_size: int, seed: int, epoch: int) -> np.ndarray:
    """Chunk-aware shuffle: permute chunks, then permute samples inside groups of
    chunks large enough to fill a batch. A pure function of its arguments."""
    rng = np.random.default_rng([seed, epoch])
    n_chunks = math.ceil(n / chunk_samples)
    chunks = rng.permutation(n_chunks)
    group = max(1, math.ceil(batch_size / chunk_samples))
    parts = []
    for g in range(0, n_chunks, group):
        idx = np.concatenate([np.arange(c * chunk_samples, min(n, (c + 1) * chunk_samples))
                              for c in chunks[g:g + group]])
        parts.append(rng.permutation(idx))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


class BatchLoader:
    """Deterministic, prefetching batch iterator over a ChunkStore.

    Each epoch reads every chunk it needs exactly once; worker threads decode
    chunks ahead of consumption for up to `prefetch` batches.
    """

    def __init__(self, store: ChunkStore, cfg: LoaderConfig, standardize: bool = False,
                 verify: bool = True):
        if cfg.batch_size > len(store):
            raise ValueError(f"batch_size {cfg.batch_size} exceeds sample count {len(store)}")
        self.store = store
        self.cfg = cfg
        self.standardize = standardize
        self.verify = verify
        if standardize and store.manifest.stats is None:
            raise ValueError("store has no band statistics to standardize with")

    def __len__(self):
        return len(self.store) // self.cfg.batch_size

    def batches(self, epoch: int = 0):
        cfg, store = self.cfg, self.store
        k = store.manifest.chunk_samples
        order = epoch_order(len(store), k, cfg.batch_size, cfg.seed, epoch)
        plan = [order[b * cfg.batch_size:(b + 1) * cfg.batch_size] for b in range(len(self))]
        needs = [list(dict.fromkeys((idx // k).tolist())) for idx in plan]
        last_use = {}
        for b, cs in enumerate(needs):
            for c in cs:
                last_use[c] = b
        futures = {}
        submitted = -1
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for b, idx in enumerate(plan):
                while submitted < min(len(plan) - 1, b + cfg.prefetch):
                    submitted += 1
                    for c in needs[submitted]:
                        if c not in futures:
                            futures[c] = pool.submit(store.read_chunk, c)
                chunks = {c: futures[c].result() for c in needs[b]}
                batch = np.stack([chunks[i // k][i % k] for i in idx.tolist()])
                if self.verify:
                    for i, arr in zip(idx.tolist(), batch):
                        store._check(i, arr)
                for c in needs[b]:
                    if last_use[c] == b:
                        del futures[c]
                if self.standardize:
                    batch = standardize_array(batch, store.manifest.stats)
                yield batch, idx

    def __iter__(self):
        return (b for b, _ in self.batches(0))


def batch_iterator(store: ChunkStore, cfg: LoaderConfig, epoch: int = 0, standardize: bool = False):
    return BatchLoader(store, cfg, standardize=standardize).batches(epoch)


class PerBandFileStore:
    """Baseline layout: one raw file per (sample, timestep, band), as when each
    band of each date sits in its own GeoTIFF."""

    def __init__(self, path, sample_shape, dtype):
        self.path = Path(path)
        self.sample_shape = tuple(sample_shape)
        self.dtype = np.dtype(dtype)
        self.open_count = 0
        self._lock = threading.Lock()
        self.count = len(list(self.path.glob("s*_t0_b0.raw")))

    @classmethod
    def write(cls, samples, path, dtype="<u2"):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        shape = None
        for i, s in enumerate(samples):
            s = np.asarray(s, dtype=dtype)
            shape = s.shape
            T, C = shape[:2]
            for t in range(T):
                for c in range(C):
                    (path / f"s{i:06d}_t{t}_b{c}.raw").write_bytes(s[t, c].tobytes())
        return cls(path, shape, dtype)

    def read_array(self, i: int) -> np.ndarray:
        T, C, H, W = self.sample_shape
        out = np.empty(self.sample_shape, dtype=self.dtype)
        for t in range(T):
            for c in range(C):
                with self._lock:
                    self.open_count += 1
                with open(self.path / f"s{i:06d}_t{t}_b{c}.raw", "rb") as fh:
                    out[t, c] = np.frombuffer(fh.read(), dtype=self.dtype).reshape(H, W)
        return out

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0):
        order = np.random.default_rng([seed, epoch]).permutation(self.count)
        for b in range(self.count // batch_size):
            idx = order[b * batch_size:(b + 1) * batch_size]
            yield np.stack([self.read_array(i) for i in idx.tolist()]), idx
