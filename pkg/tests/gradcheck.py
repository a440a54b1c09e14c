"""Central finite-difference checking shared by the unit and acceptance suites."""

import numpy as np

H = 1e-5


def numeric_grad(f, x, h=H, max_entries=None, rng=None):
    """d f / d x by central differences; optionally on a random subset of entries."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    g = np.zeros(idx.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[j] = (fp - fm) / (2 * h)
    return idx, g


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check(f, analytic, x, max_entries=60, rng=None):
    """Relative error between an analytic gradient array and finite differences of f wrt x."""
    idx, num = numeric_grad(f, x, max_entries=max_entries, rng=rng)
    return rel_error(np.asarray(analytic).reshape(-1)[idx], num)


def randomize(params, rng, scale=0.5):
    """Replace parameter values with O(1) draws so every gradient path is exercised."""
    for p in params.values():
        p.value = rng.normal(0.0, scale, p.value.shape).astype(np.float64)
