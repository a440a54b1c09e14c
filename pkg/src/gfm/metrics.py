"""Segmentation and reconstruction metrics."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, LabelError, ShapeError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    n_classes: int
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    @property
    def total(self):
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ShapeError(f"cannot merge {self.n_classes}-class and {other.n_classes}-class matrices")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts, self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_label=255) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != ignore_label
    K = cm.n_classes
    for arr, what in ((gt, "ground truth"), (pred, "prediction")):
        bad = keep & ((arr < 0) | (arr >= K))
        if bad.any():
            pos = tuple(int(i) for i in np.argwhere(bad)[0])
            raise LabelError(f"{what} label {arr[pos]} at {pos} outside [0, {K})")
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    counts = cm.counts + np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(K, counts, cm.ignored + int((~keep).sum()))


@dataclass
class MetricsReport:
    iou: list
    f1: list
    acc: list
    miou: float
    mf1: float
    macc: float
    overall_acc: float
    scored: list
    pixel_count: int
    ignored_count: int
    rmse: float | None = None
    mae: float | None = None
    ssim: float | None = None
    sample_count: int | None = None
    config_hash: str | None = None
    class_names: list = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path):
        """Per-class table: class, Accuracy, IoU, F1."""
        names = self.class_names or [str(k) for k in range(len(self.iou))]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "accuracy", "iou", "f1"])
            for n, a, i, f in zip(names, self.acc, self.iou, self.f1):
                w.writerow([n, _fmt(a), _fmt(i), _fmt(f)])
            w.writerow(["mean", _fmt(self.macc), _fmt(self.miou), _fmt(self.mf1)])


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def config_hash(config) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def summarize(cm: ConfusionMatrix, **extra) -> MetricsReport:
    """Per-class IoU/F1/recall; means over classes whose union is non-empty."""
    if cm.total == 0:
        raise EmptyInputError("confusion matrix holds no evaluated pixels")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    union = tp + fp + fn
    scored = union > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(scored, tp / union, np.nan)
        f1 = np.where(scored, 2 * tp / (2 * tp + fp + fn), np.nan)
        acc = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
    acc_scored = scored & (tp + fn > 0)

    def clean(a):
        return [None if np.isnan(v) else float(v) for v in a]

    return MetricsReport(
        iou=clean(iou), f1=clean(f1), acc=clean(acc),
        miou=float(iou[scored].mean()),
        mf1=float(f1[scored].mean()),
        macc=float(acc[acc_scored].mean()) if acc_scored.any() else 0.0,
        overall_acc=float(tp.sum() / c.sum()),
        scored=[int(k) for k in np.flatnonzero(scored)],
        pixel_count=cm.total,
        ignored_count=cm.ignored,
        **extra,
    )


def masked_rmse_mae(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    n = int(m.sum())
    if n == 0:
        raise EmptyInputError("mask selects no pixels")
    d = (pred - target)[m]
    return float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d)))


SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation with a 1-D kernel along both axes."""
    n = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim(img_a, img_b, data_range=None, window=11, sigma=1.5, k1=SSIM_K1, k2=SSIM_K2):
    """Mean SSIM over valid window positions.

    2-D inputs are compared directly; (C, H, W) or (T, C, H, W) inputs average
    the per-band scores. `data_range` defaults to max - min of `img_b`, the
    reference image.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim > 2:
        flat_a = a.reshape(-1, *a.shape[-2:])
        flat_b = b.reshape(-1, *b.shape[-2:])
        return float(np.mean([ssim(x, y, data_range, window, sigma, k1, k2)
                              for x, y in zip(flat_a, flat_b)]))
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    if data_range is None:
        data_range = float(b.max() - b.min())
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
