from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import StateError
from .params import ParamStore

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
DEFAULT_WEIGHT_DECAY = 0.05


def adamw_step(params: ParamStore, lr: float, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS,
               weight_decay=DEFAULT_WEIGHT_DECAY, names=None):
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    `names` restricts the update to a subset (e.g. a frozen encoder is left
    out). Parameters flagged ``decay=False`` (biases, norms, tokens) skip decay.
    """
    keys = list(params) if names is None else list(names)
    for k in keys:
        if params[k].grad is None:
            raise StateError(f"parameter {k!r} has no gradient")
    for k in keys:
        p = params[k]
        g = p.grad
        p.step += 1
        if weight_decay and p.decay:
            p.value *= (1.0 - lr * weight_decay)
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype)


@dataclass(frozen=True)
class LrSchedule:
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def one_cycle_lr(schedule: LrSchedule, step) -> float:
    """Linear warmup from max/25 to max, then cosine decay to max/1e4."""
    s = min(max(float(step), 0.0), float(schedule.total_steps))
    top = schedule.max_lr
    start = top / schedule.start_div
    floor = top / schedule.final_div
    warm = schedule.warmup_fraction * schedule.total_steps
    if s < warm:
        return start + (top - start) * (s / warm)
    frac = (s - warm) / (schedule.total_steps - warm)
    return top - (top - floor) * 0.5 * (1.0 - math.cos(math.pi * frac))
