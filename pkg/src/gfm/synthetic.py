"""Synthetic datasets standing in for the real benchmark data."""

from __future__ import annotations

import numpy as np

from .raster import DEFAULT_BANDS, generate_synthetic_tile


def chip_batch(n, size=64, t=3, seed=0, tile_size=256, per_tile=2):
    """n clear chips as a raw (n, T, C, size, size) uint16 array, cut at random
    grid positions from synthetic tiles (`per_tile` windows from each tile)."""
    per_side = tile_size // size
    rng = np.random.default_rng([seed, 1])
    out = []
    k = 0
    while len(out) < n:
        tile = generate_synthetic_tile(seed * 100_003 + k, tile_size, t, 0.0)[0].data
        for cell in rng.choice(per_side * per_side, size=min(per_tile, per_side * per_side), replace=False):
            j, i = divmod(int(cell), per_side)
            out.append(tile[:, :, j * size:(j + 1) * size, i * size:(i + 1) * size])
        k += 1
    return np.ascontiguousarray(np.stack(out[:n]))


def vegetation_labels(raw, t_index=None, threshold=0.35):
    """Binary map: 1 where the NIR/red normalised difference exceeds `threshold`."""
    raw = np.asarray(raw, dtype=np.float64)
    T = raw.shape[-4]
    t = T // 2 if t_index is None else t_index
    red = raw[..., t, DEFAULT_BANDS.index("B04"), :, :]
    nir = raw[..., t, DEFAULT_BANDS.index("B05"), :, :]
    ndvi = (nir - red) / np.maximum(nir + red, 1.0)
    return (ndvi > threshold).astype(np.uint8)


def segmentation_task(n, size=64, t=3, seed=0, threshold=0.35):
    raw = chip_batch(n, size, t, seed)
    return raw, vegetation_labels(raw, threshold=threshold)


def cloud_masks(n, size=64, seed=0, fraction_range=(0.05, 0.4)):
    """(n, size, size) quality-code frames taken from synthetic cloud fields."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        frac = float(rng.uniform(*fraction_range))
        _, masks = generate_synthetic_tile(seed * 100_003 + 50_000 + i, size, 1, frac)
        out.append(masks[0].codes)
    return np.stack(out)
