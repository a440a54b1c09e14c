"""Spatiotemporal masked autoencoder built on `gfm.nn`."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, NumericError, ShapeError
from .nn import (Block, LayerNorm, Linear, LrSchedule, ParamStore, PatchEmbed3d, adamw_step,
                 masked_mse, one_cycle_lr, trunc_normal)
from .nn.optim import DEFAULT_WEIGHT_DECAY
from .raster import ADJACENT, CLOUD, NODATA, SHADOW, BandStats, RasterChip, standardize_array, unstandardize

logger = logging.getLogger(__name__)

DEFAULT_BAD_CODES = frozenset({CLOUD, SHADOW, ADJACENT, NODATA})


class EmptyMaskError(DegenerateInputError):
    """A quality-derived mask plan would leave nothing to reconstruct."""


# ---------------------------------------------------------------------------
# positional encoding

def sincos_1d(pos, dim):
    """Interleaved sin/cos encoding: columns (sin w0 p, cos w0 p, sin w1 p, ...)."""
    if dim % 2:
        raise ConfigError(f"1-D encoding dim must be even, got {dim}")
    pos = np.asarray(pos, dtype=np.float64).reshape(-1)
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    ang = pos[:, None] * omega[None, :]
    out = np.empty((pos.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def posenc_split(dim):
    if dim % 16:
        raise ConfigError(f"positional encoding dim must be divisible by 16, got {dim}")
    d_t = dim // 4
    d_t += d_t % 2
    d_h = (dim - d_t) // 2
    return d_t, d_h, dim - d_t - d_h


def posenc_3d(t, h, w, dim):
    """(t*h*w, dim) fixed encoding, rows in (t, h, w) row-major order,
    columns [time | height | width]."""
    d_t, d_h, d_w = posenc_split(dim)
    tt, hh, ww = np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij")
    return np.concatenate([
        sincos_1d(tt.ravel(), d_t),
        sincos_1d(hh.ravel(), d_h),
        sincos_1d(ww.ravel(), d_w),
    ], axis=1)


# ---------------------------------------------------------------------------
# configuration and mask plans

@dataclass(frozen=True)
class MaeConfig:
    input_size: tuple = (3, 6, 224, 224)
    patch: tuple = (1, 16, 16)
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    decoder_dim: int | None = None
    decoder_depth: int = 4
    decoder_heads: int | None = None
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    norm_pix_loss: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "patch", tuple(self.patch))
        if self.decoder_dim is None:
            object.__setattr__(self, "decoder_dim", self.embed_dim // 2)
        if self.decoder_heads is None:
            object.__setattr__(self, "decoder_heads", max(1, self.num_heads // 2))
        T, C, H, W = self.input_size
        pt, ph, pw = self.patch
        if T % pt or H % ph or W % pw:
            raise ConfigError(f"patch {self.patch} does not divide input {self.input_size}", "/model/patch")
        if self.embed_dim % self.num_heads:
            raise ConfigError("num_heads must divide embed_dim", "/model/num_heads")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_heads must divide decoder_dim", "/model/decoder_heads")
        for name in ("embed_dim", "decoder_dim"):
            if getattr(self, name) % 16:
                raise ConfigError(f"{name} must be divisible by 16", f"/model/{name}")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)", "/model/mask_ratio")

    @property
    def grid(self):
        T, _, H, W = self.input_size
        pt, ph, pw = self.patch
        return T // pt, H // ph, W // pw

    @property
    def n_tokens(self):
        return int(np.prod(self.grid))

    @property
    def patch_dim(self):
        return int(np.prod(self.patch)) * self.input_size[1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def n_masked(n_tokens, ratio):
    return int(math.floor(ratio * n_tokens + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    n_tokens: int
    masked: np.ndarray
    visible: np.ndarray
    origin: str = "random"

    def __post_init__(self):
        m = np.asarray(self.masked, dtype=np.int64)
        v = np.asarray(self.visible, dtype=np.int64)
        object.__setattr__(self, "masked", m)
        object.__setattr__(self, "visible", v)
        allidx = np.concatenate([m, v])
        if allidx.size != self.n_tokens or not np.array_equal(np.sort(allidx), np.arange(self.n_tokens)):
            raise ShapeError(f"masked/visible sets do not partition {self.n_tokens} tokens")

    @property
    def mask(self):
        out = np.zeros(self.n_tokens, dtype=bool)
        out[self.masked] = True
        return out


def make_mask_plan(n_tokens, ratio, seed) -> MaskPlan:
    if n_tokens < 1:
        raise ValueError("need at least one token")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(n_tokens)
    k = n_masked(n_tokens, ratio)
    return MaskPlan(n_tokens, np.sort(perm[:k]), np.sort(perm[k:]), "random")


def make_mask_plan_from_quality(grid, patch, codes, target_t, bad_codes=DEFAULT_BAD_CODES) -> MaskPlan:
    """Mask every token of timestep `target_t` whose footprint holds a bad pixel.

    codes: (T, H, W) array, a list of QualityMask, or a single (H, W) array for
    the target timestep.
    """
    gt, gh, gw = grid
    pt, ph, pw = patch
    if isinstance(codes, (list, tuple)):
        codes = np.stack([getattr(c, "codes", c) for c in codes])
    codes = np.asarray(codes)
    frame = codes if codes.ndim == 2 else codes[target_t]
    if frame.shape != (gh * ph, gw * pw):
        raise ShapeError(f"quality mask {frame.shape} not aligned with token grid {(gh * ph, gw * pw)}")
    bad = np.isin(frame, list(bad_codes)).reshape(gh, ph, gw, pw).any(axis=(1, 3))
    t_tok = target_t // pt
    flat = np.zeros((gt, gh, gw), dtype=bool)
    flat[t_tok] = bad
    flat = flat.ravel()
    if not flat.any():
        raise EmptyMaskError("quality mask marks no patch as bad; nothing to reconstruct")
    idx = np.arange(flat.size)
    return MaskPlan(flat.size, idx[flat], idx[~flat], "quality-mask")


def bad_pixel_mask(codes, bad_codes=DEFAULT_BAD_CODES):
    return np.isin(np.asarray(codes), list(bad_codes))


# ---------------------------------------------------------------------------
# patch <-> image

def patchify(x, patch):
    """(B, T, C, H, W) -> (B, N, pt*ph*pw*C) with per-token order (pt, ph, pw, C)."""
    B, T, C, H, W = x.shape
    pt, ph, pw = patch
    gt, gh, gw = T // pt, H // ph, W // pw
    p = x.reshape(B, gt, pt, C, gh, ph, gw, pw).transpose(0, 1, 4, 6, 2, 5, 7, 3)
    return p.reshape(B, gt * gh * gw, pt * ph * pw * C)


def unpatchify(p, patch, input_size):
    T, C, H, W = input_size
    pt, ph, pw = patch
    gt, gh, gw = T // pt, H // ph, W // pw
    B = p.shape[0]
    x = p.reshape(B, gt, gh, gw, pt, ph, pw, C).transpose(0, 1, 4, 7, 2, 5, 3, 6)
    return x.reshape(B, T, C, H, W)


def token_pixel_mask(token_mask, patch, input_size):
    """Expand a (B, N) token mask to (B, T, C, H, W) pixels."""
    T, C, H, W = input_size
    P = int(np.prod(patch)) * C
    rep = np.repeat(np.asarray(token_mask, dtype=bool)[..., None], P, axis=-1)
    return unpatchify(rep, patch, input_size)


# ---------------------------------------------------------------------------
# model

class MaskedAutoencoder:
    """Asymmetric encoder/decoder over 3-D tubelet tokens.

    The encoder sees only visible tokens; the decoder fills masked positions
    with a shared learned token, re-adds positions and predicts pixels for
    every token.
    """

    def __init__(self, cfg: MaeConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = p = ParamStore(dtype)
        T, C, H, W = cfg.input_size
        self.patch_embed = PatchEmbed3d(p, "encoder.patch_embed", C, cfg.embed_dim, cfg.patch, rng)
        self.blocks = [Block(p, f"encoder.blocks.{i}", cfg.embed_dim, cfg.num_heads, rng, cfg.mlp_ratio)
                       for i in range(cfg.depth)]
        self.norm = LayerNorm(p, "encoder.norm", cfg.embed_dim)
        self.dec_embed = Linear(p, "decoder.embed", cfg.embed_dim, cfg.decoder_dim, rng)
        self.mask_token = p.add("decoder.mask_token", trunc_normal(rng, (cfg.decoder_dim,)), decay=False)
        self.dec_blocks = [Block(p, f"decoder.blocks.{i}", cfg.decoder_dim, cfg.decoder_heads, rng, cfg.mlp_ratio)
                           for i in range(cfg.decoder_depth)]
        self.dec_norm = LayerNorm(p, "decoder.norm", cfg.decoder_dim)
        self.pred = Linear(p, "decoder.pred", cfg.decoder_dim, cfg.patch_dim, rng)
        self._pos_cache = {}

    @property
    def dtype(self):
        return self.params.dtype

    def astype(self, dtype):
        self.params.astype(dtype)
        self._pos_cache.clear()
        return self

    def _pos(self, dim):
        key = (dim, self.dtype.str)
        if key not in self._pos_cache:
            self._pos_cache[key] = posenc_3d(*self.cfg.grid, dim).astype(self.dtype)
        return self._pos_cache[key]

    def _check_input(self, x):
        if x.ndim != 5 or tuple(x.shape[1:]) != self.cfg.input_size:
            raise ShapeError(f"input {x.shape} does not match configured (B, *{self.cfg.input_size})")

    # -- encoder
    def encode(self, x, visible):
        """x (B, T, C, H, W) standardized; visible (B, Nv) token indices in feed order."""
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        visible = np.asarray(visible, dtype=np.int64)
        if visible.ndim == 1:
            visible = np.broadcast_to(visible, (x.shape[0], visible.size))
        N = self.cfg.n_tokens
        if visible.shape[0] != x.shape[0] or (visible.size and (visible.min() < 0 or visible.max() >= N)):
            raise ShapeError(f"visible index array {visible.shape} inconsistent with {N} tokens")
        tok, c_pe = self.patch_embed.forward(x)
        B = x.shape[0]
        tok = tok.reshape(B, N, -1) + self._pos(self.cfg.embed_dim)
        h = np.take_along_axis(tok, visible[..., None], axis=1)
        caches = []
        for blk in self.blocks:
            h, c = blk.forward(h)
            caches.append(c)
        h, c_n = self.norm.forward(h)
        return h, (c_pe, visible, caches, c_n)

    def encode_backward(self, dh, cache):
        c_pe, visible, caches, c_n = cache
        dh = self.norm.backward(dh, c_n)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dh = blk.backward(dh, c)
        B = dh.shape[0]
        dtok = np.zeros((B, self.cfg.n_tokens, dh.shape[-1]), dtype=dh.dtype)
        np.put_along_axis(dtok, visible[..., None], dh, axis=1)
        gt, gh, gw = self.cfg.grid
        return self.patch_embed.backward(dtok.reshape(B, gt, gh, gw, -1), c_pe)

    # -- decoder
    def decode(self, latent, visible):
        B, Nv, _ = latent.shape
        N = self.cfg.n_tokens
        y, c_e = self.dec_embed.forward(latent)
        full = np.broadcast_to(self.mask_token.value, (B, N, self.cfg.decoder_dim)).copy()
        np.put_along_axis(full, visible[..., None], y, axis=1)
        h = full + self._pos(self.cfg.decoder_dim)
        caches = []
        for blk in self.dec_blocks:
            h, c = blk.forward(h)
            caches.append(c)
        h, c_n = self.dec_norm.forward(h)
        out, c_p = self.pred.forward(h)
        return out, (c_e, visible, caches, c_n, c_p)

    def decode_backward(self, dout, cache):
        c_e, visible, caches, c_n, c_p = cache
        dh = self.dec_norm.backward(self.pred.backward(dout, c_p), c_n)
        for blk, c in zip(reversed(self.dec_blocks), reversed(caches)):
            dh = blk.backward(dh, c)
        dy = np.take_along_axis(dh, visible[..., None], axis=1)
        at_mask = np.ones(dh.shape[:2], dtype=bool)
        np.put_along_axis(at_mask, visible, False, axis=1)
        self.mask_token.accumulate(dh[at_mask].sum(axis=0))
        return self.dec_embed.backward(dy, c_e)

    def forward(self, x, visible):
        latent, c_enc = self.encode(x, visible)
        pred, c_dec = self.decode(latent, c_enc[1])
        return pred, (c_enc, c_dec)

    def backward(self, dpred, cache):
        c_enc, c_dec = cache
        return self.encode_backward(self.decode_backward(dpred, c_dec), c_enc)

    def targets(self, x):
        t = patchify(x.astype(self.dtype, copy=False), self.cfg.patch)
        if self.cfg.norm_pix_loss:
            mu = t.mean(axis=-1, keepdims=True)
            var = t.var(axis=-1, keepdims=True)
            t = (t - mu) / np.sqrt(var + 1e-6)
        return t


def random_plans(batch, n_tokens, ratio, rng):
    """Per-sample random plans sharing the masked count; returns (visible, mask)."""
    plans = [make_mask_plan(n_tokens, ratio, rng) for _ in range(batch)]
    visible = np.stack([p.visible for p in plans])
    mask = np.stack([p.mask for p in plans])
    return visible, mask


def mae_loss(model: MaskedAutoencoder, x, visible, mask):
    pred, cache = model.forward(x, visible)
    loss, dpred = masked_mse(pred, model.targets(x), mask)
    return loss, dpred, cache


def pretrain_step(batch, model: MaskedAutoencoder, schedule: LrSchedule, step: int, seed: int = 0,
                  weight_decay: float = DEFAULT_WEIGHT_DECAY) -> float:
    """One optimisation step on a standardized (B, T, C, H, W) batch."""
    rng = np.random.default_rng([seed, step])
    visible, mask = random_plans(batch.shape[0], model.cfg.n_tokens, model.cfg.mask_ratio, rng)
    loss, dpred, cache = mae_loss(model, batch, visible, mask)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at step {step}")
    model.params.zero_grad()
    model.backward(dpred, cache)
    adamw_step(model.params, one_cycle_lr(schedule, step), weight_decay=weight_decay)
    return loss


def pretrain(model: MaskedAutoencoder, batches, schedule: LrSchedule, seed: int = 0,
             weight_decay: float = DEFAULT_WEIGHT_DECAY, log_every: int = 0):
    """Run `schedule.total_steps` steps drawing from an iterable of batch iterables
    (one per epoch, restarted as needed). Returns the per-step loss list."""
    losses = []
    step = 0
    epoch = 0
    while step < schedule.total_steps:
        produced = False
        for batch in batches(epoch):
            produced = True
            losses.append(pretrain_step(batch, model, schedule, step, seed, weight_decay))
            if log_every and step % log_every == 0:
                logger.info("pretrain step %d loss %.5f", step, losses[-1])
            step += 1
            if step >= schedule.total_steps:
                break
        if not produced:
            raise ValueError("batch source produced no batches")
        epoch += 1
    return losses


def masked_mse_eval(model: MaskedAutoencoder, x, seed: int = 0):
    """Masked reconstruction MSE on a standardized batch under seeded random plans."""
    rng = np.random.default_rng([seed, 987654321])
    visible, mask = random_plans(x.shape[0], model.cfg.n_tokens, model.cfg.mask_ratio, rng)
    pred, _ = model.forward(x, visible)
    loss, _ = masked_mse(pred, model.targets(x), mask)
    return loss


def reconstruct_image(chip: RasterChip, plan: MaskPlan, model: MaskedAutoencoder, stats: BandStats) -> RasterChip:
    """Paste model predictions into masked patches; visible patches keep the input values."""
    cfg = model.cfg
    raw = chip.data[None].astype(np.float32)
    x = standardize_array(chip.data[None], stats, dtype=model.dtype)
    pred, _ = model.forward(x, plan.visible[None])
    img = unstandardize(unpatchify(pred, cfg.patch, cfg.input_size), stats).astype(np.float32)
    pix = token_pixel_mask(plan.mask[None], cfg.patch, cfg.input_size)
    out = np.where(pix, img, raw)[0]
    return RasterChip(out, chip.band_names, chip.timestamps, chip.origin, None)


def rgb_preview(chip_data, band_names, t=0, bands=("B04", "B03", "B02"), lo=None, hi=None):
    """8-bit (H, W, 3) preview of one timestep with a 2-98 percentile stretch."""
    idx = [list(band_names).index(b) for b in bands]
    rgb = np.stack([chip_data[t, i].astype(np.float64) for i in idx], axis=-1)
    lo = np.percentile(rgb, 2) if lo is None else lo
    hi = np.percentile(rgb, 98) if hi is None else hi
    return np.clip((rgb - lo) / max(hi - lo, 1e-9) * 255.0, 0, 255).astype(np.uint8)
