"""Layers with explicit forward/backward passes.

Every `forward` returns ``(output, cache)`` and the matching `backward(dout,
cache)` returns the input gradient while accumulating parameter gradients into
the owning ParamStore. Keeping caches outside the layer lets several forward
passes be in flight at once.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ShapeError
from .params import ParamStore, trunc_normal

LN_EPS = 1e-6


def _need(cond, msg, *shapes):
    if not cond:
        raise ShapeError(msg + ": " + " vs ".join(str(tuple(s)) for s in shapes))


class Linear:
    def __init__(self, params: ParamStore, name: str, d_in: int, d_out: int, rng):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        self.w = params.add(f"{name}.weight", trunc_normal(rng, (d_in, d_out)))
        self.b = params.add(f"{name}.bias", np.zeros(d_out), decay=False)

    def forward(self, x):
        _need(x.shape[-1] == self.d_in, f"{self.name}: input last dim != weight rows",
              x.shape, self.w.shape)
        return x @ self.w.value + self.b.value, x

    def backward(self, dy, x):
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.w.accumulate(x2.T @ dy2)
        self.b.accumulate(dy2.sum(axis=0))
        return dy @ self.w.value.T


class LayerNorm:
    def __init__(self, params: ParamStore, name: str, dim: int):
        self.name = name
        self.dim = dim
        self.g = params.add(f"{name}.weight", np.ones(dim), decay=False)
        self.b = params.add(f"{name}.bias", np.zeros(dim), decay=False)

    def forward(self, x):
        _need(x.shape[-1] == self.dim, f"{self.name}: normalised dim mismatch", x.shape, (self.dim,))
        xhat, inv = layer_norm(x)
        return xhat * self.g.value + self.b.value, (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        self.g.accumulate((dy * xhat).reshape(-1, self.dim).sum(axis=0))
        self.b.accumulate(dy.reshape(-1, self.dim).sum(axis=0))
        return layer_norm_backward(dy * self.g.value, xhat, inv)


def layer_norm(x, eps=LN_EPS):
    """Normalise over the last axis without affine terms. Returns (xhat, 1/std)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layer_norm_backward(dxhat, xhat, inv):
    d = dxhat.shape[-1]
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf) GELU."""
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF)), x


def gelu_backward(dy, x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


class MultiHeadAttention:
    """Full self-attention over (B, N, D) token sequences; no attention mask."""

    def __init__(self, params: ParamStore, name: str, dim: int, heads: int, rng):
        if dim % heads:
            raise ShapeError(f"{name}: heads {heads} do not divide dim {dim}")
        self.dim, self.heads = dim, heads
        self.dh = dim // heads
        self.qkv = Linear(params, f"{name}.qkv", dim, 3 * dim, rng)
        self.proj = Linear(params, f"{name}.proj", dim, dim, rng)

    def forward(self, x):
        _need(x.ndim == 3 and x.shape[-1] == self.dim, "attention input must be (B, N, dim)",
              x.shape, (self.dim,))
        B, N, _ = x.shape
        qkv, c_qkv = self.qkv.forward(x)
        qkv = qkv.reshape(B, N, 3, self.heads, self.dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scale = 1.0 / math.sqrt(self.dh)
        att = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, self.dim)
        out, c_proj = self.proj.forward(o)
        return out, (c_qkv, q, k, v, att, c_proj)

    def backward(self, dy, cache):
        c_qkv, q, k, v, att, c_proj = cache
        B, H, N, dh = q.shape
        do = self.proj.backward(dy, c_proj)
        do = do.reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = softmax_backward(datt, att) * (1.0 / math.sqrt(dh))
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * self.dim)
        return self.qkv.backward(dqkv, c_qkv)


class Mlp:
    def __init__(self, params: ParamStore, name: str, dim: int, hidden: int, rng):
        self.fc1 = Linear(params, f"{name}.fc1", dim, hidden, rng)
        self.fc2 = Linear(params, f"{name}.fc2", hidden, dim, rng)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a, cg = gelu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, cg, c2)

    def backward(self, dy, cache):
        c1, cg, c2 = cache
        return self.fc1.backward(gelu_backward(self.fc2.backward(dy, c2), cg), c1)


class Block:
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, params: ParamStore, name: str, dim: int, heads: int, rng, mlp_ratio=4.0):
        self.norm1 = LayerNorm(params, f"{name}.norm1", dim)
        self.attn = MultiHeadAttention(params, f"{name}.attn", dim, heads, rng)
        self.norm2 = LayerNorm(params, f"{name}.norm2", dim)
        self.mlp = Mlp(params, f"{name}.mlp", dim, int(dim * mlp_ratio), rng)

    def forward(self, x):
        h, cn1 = self.norm1.forward(x)
        a, ca = self.attn.forward(h)
        x = x + a
        h, cn2 = self.norm2.forward(x)
        m, cm = self.mlp.forward(h)
        return x + m, (cn1, ca, cn2, cm)

    def backward(self, dy, cache):
        cn1, ca, cn2, cm = cache
        dx = dy + self.norm2.backward(self.mlp.backward(dy, cm), cn2)
        return dx + self.norm1.backward(self.attn.backward(dx, ca), cn1)


class PatchEmbed3d:
    """3-D convolution with stride equal to kernel (non-overlapping tubelets).

    Input (B, T, C, H, W); kernel (D, C, kt, kh, kw); output (B, T/kt, H/kh, W/kw, D).
    """

    def __init__(self, params: ParamStore, name: str, in_chans: int, dim: int, kernel, rng):
        self.kernel = tuple(kernel)
        self.in_chans, self.dim = in_chans, dim
        kt, kh, kw = self.kernel
        fan = in_chans * kt * kh * kw
        self.w = params.add(f"{name}.weight", trunc_normal(rng, (dim, in_chans, kt, kh, kw)))
        self.b = params.add(f"{name}.bias", np.zeros(dim), decay=False)
        self._fan = fan

    def grid(self, T, H, W):
        kt, kh, kw = self.kernel
        if T % kt or H % kh or W % kw:
            raise ShapeError(f"input (T={T}, H={H}, W={W}) not divisible by kernel {self.kernel}")
        return T // kt, H // kh, W // kw

    def extract(self, x):
        """(B, T, C, H, W) -> (B, T', H', W', C*kt*kh*kw) in (C, kt, kh, kw) order."""
        _need(x.ndim == 5 and x.shape[2] == self.in_chans, "conv3d input must be (B, T, C, H, W)",
              x.shape, self.w.shape)
        B, T, C, H, W = x.shape
        gt, gh, gw = self.grid(T, H, W)
        kt, kh, kw = self.kernel
        p = x.reshape(B, gt, kt, C, gh, kh, gw, kw).transpose(0, 1, 4, 6, 3, 2, 5, 7)
        return p.reshape(B, gt, gh, gw, self._fan)

    def forward(self, x):
        p = self.extract(x)
        wm = self.w.value.reshape(self.dim, self._fan)
        return p @ wm.T + self.b.value, (p, x.shape)

    def backward(self, dy, cache):
        p, xshape = cache
        B, T, C, H, W = xshape
        kt, kh, kw = self.kernel
        gt, gh, gw = T // kt, H // kh, W // kw
        dy2 = dy.reshape(-1, self.dim)
        self.w.accumulate((dy2.T @ p.reshape(-1, self._fan)).reshape(self.w.shape))
        self.b.accumulate(dy2.sum(axis=0))
        dp = dy @ self.w.value.reshape(self.dim, self._fan)
        dp = dp.reshape(B, gt, gh, gw, C, kt, kh, kw).transpose(0, 1, 5, 4, 2, 6, 3, 7)
        return dp.reshape(xshape)


class ConvTranspose2d:
    """Transposed convolution with kernel == stride (default 2x2, stride 2) on
    channels-last maps: (B, H, W, Cin) -> (B, s*H, s*W, Cout).

    Weight layout (Cin, Cout, k, k) follows the usual transposed-conv convention.
    """

    def __init__(self, params: ParamStore, name: str, c_in: int, c_out: int, rng, kernel=2, stride=2,
                 init_std=None):
        if kernel != stride:
            raise ShapeError(f"{name}: only kernel == stride is supported, got {kernel}, {stride}")
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        # each output pixel sees exactly c_in inputs, so scale by fan-in
        std = 1.0 / np.sqrt(c_in) if init_std is None else init_std
        self.w = params.add(f"{name}.weight", trunc_normal(rng, (c_in, c_out, kernel, kernel), std))
        self.b = params.add(f"{name}.bias", np.zeros(c_out), decay=False)

    def forward(self, x):
        _need(x.ndim == 4 and x.shape[-1] == self.c_in, "transposed conv input must be (B, H, W, Cin)",
              x.shape, self.w.shape)
        B, H, W, _ = x.shape
        k = self.k
        y = x @ self.w.value.reshape(self.c_in, -1)
        y = y.reshape(B, H, W, self.c_out, k, k).transpose(0, 1, 4, 2, 5, 3)
        return y.reshape(B, H * k, W * k, self.c_out) + self.b.value, x

    def backward(self, dy, x):
        B, H, W, _ = x.shape
        k = self.k
        self.b.accumulate(dy.reshape(-1, self.c_out).sum(axis=0))
        d = dy.reshape(B, H, k, W, k, self.c_out).transpose(0, 1, 3, 5, 2, 4).reshape(B * H * W, -1)
        self.w.accumulate((x.reshape(-1, self.c_in).T @ d).reshape(self.w.shape))
        return (d @ self.w.value.reshape(self.c_in, -1).T).reshape(x.shape)
