"""`ckpt.json` + `ckpt.bin` checkpoint pair.

The binary file is the concatenation of every parameter's values as
little-endian float32, in the order listed in the JSON.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CompatibilityError, CorruptionError
from .params import ParamStore

_DT = np.dtype("<f4")


def save_checkpoint(params: ParamStore, directory, schedule=None, rng_state=None, extra=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "names": list(params),
        "shapes": [list(p.shape) for p in params.values()],
        "steps": [p.step for p in params.values()],
        "dtype": _DT.str,
        "schedule": schedule,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    with open(d / "ckpt.bin", "wb") as fh:
        for p in params.values():
            fh.write(np.ascontiguousarray(p.value, dtype=_DT).tobytes())
    (d / "ckpt.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_checkpoint(directory):
    d = Path(directory)
    meta = json.loads((d / "ckpt.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((d / "ckpt.bin").read_bytes(), dtype=_DT)
    total = sum(int(np.prod(s)) for s in meta["shapes"])
    if raw.size != total:
        raise CorruptionError(f"ckpt.bin holds {raw.size} values, metadata expects {total}")
    arrays, off = {}, 0
    for name, shape in zip(meta["names"], meta["shapes"]):
        n = int(np.prod(shape))
        arrays[name] = raw[off:off + n].reshape(shape)
        off += n
    return meta, arrays


def load_checkpoint(params: ParamStore, directory, prefix: str = "", strict: bool = True):
    """Copy checkpoint values into `params` (names starting with `prefix`).

    Raises CompatibilityError naming every divergent shape or missing name.
    """
    meta, arrays = read_checkpoint(directory)
    problems = []
    wanted = [k for k in params if k.startswith(prefix)]
    for k in wanted:
        if k not in arrays:
            if strict:
                problems.append(f"{k}: missing from checkpoint")
            continue
        if tuple(arrays[k].shape) != params[k].shape:
            problems.append(f"{k}: checkpoint {tuple(arrays[k].shape)} vs model {params[k].shape}")
    if problems:
        raise CompatibilityError("checkpoint does not match model: " + "; ".join(problems))
    steps = dict(zip(meta["names"], meta["steps"]))
    for k in wanted:
        if k in arrays:
            params[k].value = arrays[k].astype(params.dtype, copy=True)
            params[k].step = steps[k]
    return meta
