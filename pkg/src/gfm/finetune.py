"""Downstream adaptation: segmentation head over the MAE encoder, cloud-gap
imputation fine-tuning, and the data-efficiency sweep."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .mae import (EmptyMaskError, MaskedAutoencoder, bad_pixel_mask, make_mask_plan_from_quality,
                  patchify, unpatchify)
from .metrics import ConfusionMatrix, accumulate, summarize
from .nn import ConvTranspose2d, Linear, ParamStore, adamw_step, dice_loss, gelu, gelu_backward
from .nn import weighted_cross_entropy
from .nn.optim import DEFAULT_WEIGHT_DECAY
from .raster import BandStats, standardize_array, unstandardize

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255


@dataclass(frozen=True)
class SegHeadConfig:
    n_classes: int = 2
    neck_channels: tuple = (512, 256, 128, 64)
    loss: str = "wce"
    class_weights: tuple | None = None
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        object.__setattr__(self, "neck_channels", tuple(self.neck_channels))
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2", "/finetune/n_classes")
        if len(self.neck_channels) != 4:
            raise ConfigError("neck needs exactly four stages", "/finetune/neck_channels")
        if self.loss not in ("wce", "dice"):
            raise ConfigError(f"unknown loss {self.loss!r}", "/finetune/loss")
        if self.class_weights is not None and len(self.class_weights) != self.n_classes:
            raise ConfigError("one class weight per class required", "/finetune/class_weights")


@dataclass(frozen=True)
class FinetuneRegime:
    encoder_init: str = "pretrained"
    encoder_trainable: bool = True

    def __post_init__(self):
        if self.encoder_init not in ("pretrained", "random"):
            raise ConfigError(f"unknown encoder_init {self.encoder_init!r}", "/finetune/regime")
        if not self.encoder_trainable and self.encoder_init != "pretrained":
            raise ConfigError("a frozen encoder must start from pretrained weights", "/finetune/regime")

    @property
    def name(self):
        if not self.encoder_trainable:
            return "frozen"
        return self.encoder_init


REGIMES = {
    "pretrained": FinetuneRegime("pretrained", True),
    "random": FinetuneRegime("random", True),
    "frozen": FinetuneRegime("pretrained", False),
}


def inverse_frequency_weights(labels, n_classes, ignore_label=IGNORE_LABEL):
    """Inverse class frequency over the training labels, normalised to mean 1."""
    lab = np.asarray(labels)
    counts = np.bincount(lab[lab != ignore_label].ravel(), minlength=n_classes).astype(np.float64)
    w = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return w / w.mean()


class SegmentationModel:
    """MAE encoder (all tokens visible) -> timestep concatenation -> four
    stride-2 transposed convolutions -> 1x1 classifier. Channels-last inside."""

    def __init__(self, mae: MaskedAutoencoder, head: SegHeadConfig, seed: int = 0):
        cfg = mae.cfg
        if cfg.patch[1] != cfg.patch[2] or cfg.patch[1] != 2 ** len(head.neck_channels):
            raise ConfigError(f"spatial patch {cfg.patch[1:]} must equal the neck's 16x upsampling",
                              "/model/patch")
        self.mae = mae
        self.head_cfg = head
        rng = np.random.default_rng([seed, 7])
        self.params = ParamStore(mae.dtype)
        for k, p in mae.params.items():
            if k.startswith("encoder."):
                self.params[k] = p
        gt = cfg.grid[0]
        chans = (gt * cfg.embed_dim,) + head.neck_channels
        self.neck = [ConvTranspose2d(self.params, f"head.neck.{i}", chans[i], chans[i + 1], rng)
                     for i in range(len(head.neck_channels))]
        self.cls = Linear(self.params, "head.cls", chans[-1], head.n_classes, rng)
        self.encoder_names = [k for k in self.params if k.startswith("encoder.")]
        self.head_names = [k for k in self.params if k.startswith("head.")]

    @property
    def dtype(self):
        return self.params.dtype

    def astype(self, dtype):
        self.mae.astype(dtype)
        self.params.astype(dtype)
        return self

    def feature_map(self, latent):
        B = latent.shape[0]
        gt, gh, gw = self.mae.cfg.grid
        D = latent.shape[-1]
        return latent.reshape(B, gt, gh, gw, D).transpose(0, 2, 3, 1, 4).reshape(B, gh, gw, gt * D)

    def forward(self, x):
        """Logits (B, H, W, K) for a standardized (B, T, C, H, W) batch."""
        N = self.mae.cfg.n_tokens
        latent, c_enc = self.mae.encode(x, np.arange(N))
        h = self.feature_map(latent)
        caches = []
        for conv in self.neck:
            h, c = conv.forward(h)
            h, cg = gelu(h)
            caches.append((c, cg))
        logits, c_cls = self.cls.forward(h)
        return logits, (c_enc, latent.shape, caches, c_cls)

    def backward(self, dlogits, cache, train_encoder=True):
        c_enc, lshape, caches, c_cls = cache
        dh = self.cls.backward(dlogits, c_cls)
        for conv, (c, cg) in zip(reversed(self.neck), reversed(caches)):
            dh = conv.backward(gelu_backward(dh, cg), c)
        if not train_encoder:
            return None
        B, N, D = lshape
        gt, gh, gw = self.mae.cfg.grid
        dlat = dh.reshape(B, gh, gw, gt, D).transpose(0, 3, 1, 2, 4).reshape(B, N, D)
        return self.mae.encode_backward(dlat, c_enc)


def seg_forward(chip, model: SegmentationModel):
    """Per-pixel logits (K, H, W) for one standardized (T, C, H, W) chip."""
    logits, _ = model.forward(np.asarray(chip)[None])
    return logits[0].transpose(2, 0, 1)


def seg_loss(logits, labels, head: SegHeadConfig, class_weights=None):
    if head.loss == "dice":
        return dice_loss(logits, labels, head.ignore_label)
    w = class_weights if class_weights is not None else head.class_weights
    return weighted_cross_entropy(logits, labels, w, head.ignore_label)


def finetune_seg_step(x, labels, model: SegmentationModel, regime: FinetuneRegime, lr: float,
                      class_weights=None, weight_decay=DEFAULT_WEIGHT_DECAY, step: int | None = None,
                      encoder_lr_scale: float = 1.0) -> float:
    logits, cache = model.forward(x)
    loss, dlogits = seg_loss(logits, labels, model.head_cfg, class_weights)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite segmentation loss at step {step}")
    model.params.zero_grad()
    model.backward(dlogits, cache, train_encoder=regime.encoder_trainable)
    adamw_step(model.params, lr, weight_decay=weight_decay, names=model.head_names)
    if regime.encoder_trainable:
        adamw_step(model.params, lr * encoder_lr_scale, weight_decay=weight_decay, names=model.encoder_names)
    return loss


def infer_seg(x, model: SegmentationModel, batch_size: int = 16):
    """Argmax label maps (B, H, W); ties resolve to the lowest class index."""
    x = np.asarray(x)
    single = x.ndim == 4
    if single:
        x = x[None]
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = model.forward(x[i:i + batch_size])
        out.append(np.argmax(logits, axis=-1).astype(np.uint8))
    res = np.concatenate(out)
    return res[0] if single else res


def evaluate_seg(model: SegmentationModel, x, labels, batch_size: int = 16) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.head_cfg.n_classes)
    pred = infer_seg(x, model, batch_size)
    return accumulate(cm, pred, labels, model.head_cfg.ignore_label)


@dataclass
class SegTrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 6e-5
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    seed: int = 0
    encoder_lr_scale: float = 1.0


def train_segmentation(model: SegmentationModel, regime: FinetuneRegime, x, labels, cfg: SegTrainConfig,
                       val=None, class_weights=None, on_epoch=None):
    """Shuffled mini-batch fine-tuning. Returns per-epoch dicts with train loss
    and, if `val` is given, validation mIoU."""
    n = len(x)
    if class_weights is None and model.head_cfg.loss == "wce" and model.head_cfg.class_weights is None:
        class_weights = inverse_frequency_weights(labels, model.head_cfg.n_classes, model.head_cfg.ignore_label)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for b in range(0, n - cfg.batch_size + 1 if n >= cfg.batch_size else 1, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            losses.append(finetune_seg_step(x[idx], labels[idx], model, regime, cfg.lr,
                                            class_weights, cfg.weight_decay, step, cfg.encoder_lr_scale))
            step += 1
        rec = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if val is not None:
            rec["miou"] = summarize(evaluate_seg(model, *val)).miou
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    return history


# ---------------------------------------------------------------------------
# cloud-gap imputation

@dataclass
class SkipCounter:
    skipped: int = 0


def cloudgap_finetune_step(x, codes, model: MaskedAutoencoder, lr: float, weight_decay=DEFAULT_WEIGHT_DECAY,
                           counter: SkipCounter | None = None, step: int | None = None):
    """One step of middle-timestep gap filling.

    x: standardized (B, T, C, H, W) clear samples; codes: (B, H, W) quality
    codes applied to the middle timestep. The loss is the RMSE over bad pixels
    of the middle timestep, pooled across the batch. Samples whose mask has no
    bad patch are skipped. Returns None if every sample was skipped.
    """
    cfg = model.cfg
    T = cfg.input_size[0]
    t_mid = T // 2
    runs = []
    for xi, ci in zip(x, codes):
        try:
            plan = make_mask_plan_from_quality(cfg.grid, cfg.patch, ci, t_mid)
        except EmptyMaskError:
            if counter is not None:
                counter.skipped += 1
            continue
        pred, cache = model.forward(xi[None], plan.visible[None])
        img = unpatchify(pred, cfg.patch, cfg.input_size)
        pix = np.zeros(img.shape, dtype=bool)
        pix[0, t_mid] = bad_pixel_mask(ci)[None]
        runs.append((img, xi[None].astype(model.dtype), pix, cache))
    if not runs:
        return None
    sq = sum(float(((img - tgt)[pix] ** 2).sum()) for img, tgt, pix, _ in runs)
    n = sum(int(pix.sum()) for *_, pix, _ in runs)
    rmse = float(np.sqrt(sq / n))
    if not np.isfinite(rmse):
        raise NumericError(f"non-finite gap-fill loss at step {step}")
    model.params.zero_grad()
    if rmse > 0:
        for img, tgt, pix, cache in runs:
            dimg = np.where(pix, (img - tgt) / (n * rmse), 0.0).astype(model.dtype)
            model.backward(patchify(dimg, cfg.patch), cache)
        adamw_step(model.params, lr, weight_decay=weight_decay)
    return rmse


def infer_gapfill(chip, codes, model: MaskedAutoencoder, stats: BandStats):
    """Fill bad pixels of the middle timestep of a raw (T, C, H, W) chip.

    Pixels outside the bad set pass through unchanged (as float32)."""
    cfg = model.cfg
    raw = np.asarray(chip)
    out = raw.astype(np.float32)
    t_mid = cfg.input_size[0] // 2
    bad = bad_pixel_mask(codes)
    if not bad.any():
        return out
    plan = make_mask_plan_from_quality(cfg.grid, cfg.patch, codes, t_mid)
    x = standardize_array(raw[None], stats, dtype=model.dtype)
    pred, _ = model.forward(x, plan.visible[None])
    img = unstandardize(unpatchify(pred, cfg.patch, cfg.input_size), stats)[0].astype(np.float32)
    out[t_mid][:, bad] = img[t_mid][:, bad]
    return out


def gapfill_predictions(model: MaskedAutoencoder, x, codes):
    """Standardized-space reconstructions for a batch, one plan per sample.

    Returns (pred, pixel_mask) over samples with at least one bad patch."""
    cfg = model.cfg
    t_mid = cfg.input_size[0] // 2
    preds, masks, kept = [], [], []
    for i, (xi, ci) in enumerate(zip(x, codes)):
        try:
            plan = make_mask_plan_from_quality(cfg.grid, cfg.patch, ci, t_mid)
        except EmptyMaskError:
            continue
        pred, _ = model.forward(xi[None], plan.visible[None])
        preds.append(unpatchify(pred, cfg.patch, cfg.input_size)[0])
        pix = np.zeros(xi.shape, dtype=bool)
        pix[t_mid] = bad_pixel_mask(ci)[None]
        masks.append(pix)
        kept.append(i)
    return np.stack(preds), np.stack(masks), kept


# ---------------------------------------------------------------------------
# data-efficiency sweep

def subsample_indices(n, fraction, seed):
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    k = int(np.floor(fraction * n))
    if k < 1:
        raise ValueError(f"fraction {fraction} of {n} items yields no samples")
    if k == n:
        return np.arange(n)
    rng = np.random.default_rng([seed, int(round(fraction * 1_000_000))])
    return np.sort(rng.choice(n, size=k, replace=False))


def run_data_efficiency_sweep(n_train, fractions, seeds, run_fn, workers: int = 1):
    """For each (fraction, seed) call ``run_fn(train_indices, seed) -> {metric: value}``.

    Returns (rows, summary): rows are (fraction, seed, metric, value); summary
    maps (fraction, metric) to (mean, std) over seeds.
    """
    jobs = [(f, s, subsample_indices(n_train, f, s)) for f in fractions for s in seeds]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda j: run_fn(j[2], j[1]), jobs))
    rows = []
    for (f, s, _), res in zip(jobs, results):
        for metric, value in sorted(res.items()):
            rows.append((f, s, metric, float(value)))
    summary = {}
    for f in fractions:
        for metric in sorted({r[2] for r in rows}):
            vals = [r[3] for r in rows if r[0] == f and r[2] == metric]
            summary[(f, metric)] = (float(np.mean(vals)), float(np.std(vals)))
    return rows, summary


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "seed", "metric", "value"])
        for f, s, m, v in rows:
            w.writerow([repr(float(f)), s, m, repr(float(v))])


def read_sweep_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [(float(r["fraction"]), int(r["seed"]), r["metric"], float(r["value"]))
                for r in csv.DictReader(fh)]
