from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError

INIT_STD = 0.02


@dataclass
class Param:
    """A parameter tensor with its gradient and AdamW moment buffers."""

    value: np.ndarray
    grad: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    decay: bool = True

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {self.value.shape}")
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g


class ParamStore(OrderedDict):
    """Ordered name -> Param map shared by all layers of a model."""

    def __init__(self, dtype=np.float32):
        super().__init__()
        self.dtype = np.dtype(dtype)

    def add(self, name, value, decay=True) -> Param:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(np.asarray(value, dtype=self.dtype).copy(), decay=decay)
        self[name] = p
        return p

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def subset(self, prefix: str) -> "ParamStore":
        """A view sharing Param objects whose names start with `prefix`."""
        out = ParamStore(self.dtype)
        for k, p in self.items():
            if k.startswith(prefix):
                out[k] = p
        return out

    def astype(self, dtype):
        """Cast values and buffers in place (64-bit for gradient checks)."""
        self.dtype = np.dtype(dtype)
        for p in self.values():
            p.value = p.value.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
            if p.grad is not None:
                p.grad = p.grad.astype(dtype)
        return self

    def state_bytes(self, prefix: str = "") -> bytes:
        return b"".join(p.value.tobytes() for k, p in self.items() if k.startswith(prefix))

    def copy_values_from(self, other: "ParamStore", prefix: str = ""):
        for k, p in other.items():
            if k.startswith(prefix) and k in self:
                if self[k].shape != p.shape:
                    raise ShapeError(f"{k}: shape {p.shape} vs {self[k].shape}")
                self[k].value = p.value.astype(self.dtype, copy=True)


def trunc_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std
