"""Neural-network primitives built on the autodiff core."""
from __future__ import annotations

import math
from typing import Dict, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError, Tensor, _result, as_tensor, clip, log, matmul, mean, reshape, softmax, transpose,
    layernorm, relu, abs_,
)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    y = matmul(x, w)
    return y + b if b is not None else y


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           pad: Union[str, int] = "same") -> Tensor:
    """2-D cross-correlation. ``x`` is (C, H, W) or (B, C, H, W); ``w`` is (O, C, k, k)."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (B,C,H,W) input and (O,C,k,k) kernel, got {x.shape}, {w.shape}")
    bsz, c, h, wd = xd.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    p = {"same": k // 2, "valid": 0}[pad] if isinstance(pad, str) else int(pad)
    if (h + 2 * p - k) % stride or (wd + 2 * p - k) % stride:
        raise ShapeError(f"conv2d: non-integral output size for input {h}x{wd}, k={k}, stride={stride}, pad={p}")
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {h}x{wd} and kernel {k}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def back(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(bsz, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial size {h}x{w} not divisible by 2")
    y = reshape(x, (*lead, h // 2, 2, w // 2, 2))
    return mean(y, axis=(-3, -1))


def grid_sample_bilinear(feature: Tensor, points: Tensor) -> Tensor:
    """Sample ``feature`` (C,h,w) or (B,C,h,w) at pixel coordinates ``points`` (N,2) or (B,N,2).

    Points are (x, y) in texel units; out-of-range coordinates are clamped to the border.
    Returns (C, N) or (B, C, N). Differentiable in both the feature map and the points.
    """
    points = as_tensor(points, feature)
    squeeze = feature.ndim == 3
    f = feature.data[None] if squeeze else feature.data
    pts = points.data[None] if squeeze else points.data
    if f.ndim != 4 or pts.ndim != 3 or pts.shape[-1] != 2 or pts.shape[0] != f.shape[0]:
        raise ShapeError(f"grid_sample: bad shapes feature {feature.shape}, points {points.shape}")
    bsz, c, h, w = f.shape
    n = pts.shape[1]
    px, py = pts[..., 0], pts[..., 1]
    x = np.clip(px, 0, w - 1)
    y = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(x), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (x - x0).astype(f.dtype)[..., None]
    wy = (y - y0).astype(f.dtype)[..., None]
    ft = f.transpose(0, 2, 3, 1)  # B,h,w,C
    bi = np.arange(bsz)[:, None]
    f00, f01 = ft[bi, y0, x0], ft[bi, y0, x1]
    f10, f11 = ft[bi, y1, x0], ft[bi, y1, x1]
    out = ((1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f01
           + (1 - wx) * wy * f10 + wx * wy * f11)  # B,N,C
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    out = out[0] if squeeze else out
    inx = ((px >= 0) & (px <= w - 1))[..., None]
    iny = ((py >= 0) & (py <= h - 1))[..., None]

    def back(g):
        g3 = (g[None] if squeeze else g).transpose(0, 2, 1)  # B,N,C
        gf = np.zeros((bsz * h * w, c), dtype=f.dtype)
        base = (np.arange(bsz)[:, None] * h)
        for yy, xx, wt in ((y0, x0, (1 - wx) * (1 - wy)), (y0, x1, wx * (1 - wy)),
                           (y1, x0, (1 - wx) * wy), (y1, x1, wx * wy)):
            flat = ((base + yy) * w + xx).ravel()
            np.add.at(gf, flat, (g3 * wt).reshape(-1, c))
        gf = gf.reshape(bsz, h, w, c).transpose(0, 3, 1, 2)
        dx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) * inx
        dy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) * iny
        gp = np.stack([(g3 * dx).sum(-1), (g3 * dy).sum(-1)], axis=-1)
        if squeeze:
            gf, gp = gf[0], gp[0]
        return gf, gp

    return _result(out, (feature, points), back, "grid_sample")


def soft_argmax_3d(logits: Tensor) -> Tensor:
    """Expected (x, y, z) grid coordinate under a softmax over the last three axes (D, h, w)."""
    *lead, d, h, w = logits.shape
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    grid = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1).astype(logits.dtype)
    prob = softmax(reshape(logits, (*lead, 1, d * h * w)), axis=-1)
    return reshape(matmul(prob, Tensor(grid)), (*lead, 3))


def binary_cross_entropy(prob: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean BCE on probabilities clamped to [eps, 1 - eps]."""
    t = as_tensor(target, prob)
    p = clip(prob, eps, 1.0 - eps)
    return -mean(t * log(p) + (1.0 - t) * log(1.0 - p))


def l1(pred: Tensor, target) -> Tensor:
    return mean(abs_(pred - as_tensor(target, pred)))


# ---------------------------------------------------------------- attention

Params = Dict[str, Tensor]


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic scaled dot-product weights for (..., Nq, d) queries and (..., Nk, d) keys."""
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return softmax(scores, axis=-1)


def multi_head_attention(xq: Tensor, xkv: Tensor, p: Params, prefix: str, heads: int
                         ) -> Tuple[Tensor, Tensor]:
    """Multi-head attention (pre-residual). Inputs are token-major (..., N, D).

    Returns the projected output and the (..., heads, Nq, Nk) attention weights.
    """
    dim = xq.shape[-1]
    if dim % heads:
        raise ShapeError(f"attention: width {dim} not divisible by {heads} heads")
    dh = dim // heads

    def split(t):
        *lead, n, _ = t.shape
        return transpose(reshape(t, (*lead, n, heads, dh)), (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))

    q = split(linear(xq, p[prefix + "wq"], p[prefix + "bq"]))
    k = split(linear(xkv, p[prefix + "wk"], p[prefix + "bk"]))
    v = split(linear(xkv, p[prefix + "wv"], p[prefix + "bv"]))
    att = attention_weights(q, k)
    ctx = matmul(att, v)  # ..., H, Nq, dh
    *lead, _, nq, _ = ctx.shape
    nl = len(lead)
    ctx = reshape(transpose(ctx, (*range(nl), nl + 1, nl, nl + 2)), (*lead, nq, dim))
    return linear(ctx, p[prefix + "wo"], p[prefix + "bo"]), att


def feed_forward(x: Tensor, p: Params, prefix: str) -> Tensor:
    return linear(relu(linear(x, p[prefix + "w1"], p[prefix + "b1"])), p[prefix + "w2"], p[prefix + "b2"])


def transformer_block(x: Tensor, p: Params, prefix: str, heads: int,
                      context: Optional[Tensor] = None) -> Tensor:
    """Pre-norm block: attention sublayer then feed-forward, each wrapped in a residual.

    With ``context`` the attention is cross-attention (keys/values from ``context``).
    """
    h = layernorm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    kv = h if context is None else layernorm(context, p[prefix + "lnkv.g"], p[prefix + "lnkv.b"])
    att, _ = multi_head_attention(h, kv, p, prefix + "attn.", heads)
    x = x + att
    return x + feed_forward(layernorm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"]), p, prefix + "ff.")


def transformer_stack(x: Tensor, p: Params, prefix: str, heads: int, layers: int,
                      context: Optional[Tensor] = None) -> Tensor:
    for i in range(layers):
        x = transformer_block(x, p, f"{prefix}{i}.", heads, context)
    return layernorm(x, p[prefix + "lnf.g"], p[prefix + "lnf.b"])


def self_attention(x: Tensor, p: Params, prefix: str, heads: int, layers: int = 1) -> Tensor:
    return transformer_stack(x, p, prefix, heads, layers)


def cross_attention(q_src: Tensor, kv_src: Tensor, p: Params, prefix: str, heads: int,
                    layers: int = 1) -> Tensor:
    return transformer_stack(q_src, p, prefix, heads, layers, context=kv_src)


# ---------------------------------------------------------------- parameter builders

def init_linear(store, name: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
    if zero:
        store.zeros(name + "w", (fan_in, fan_out))
    else:
        store.uniform(name + "w", (fan_in, fan_out), fan_in)
    store.zeros(name + "b", (fan_out,))


def init_layernorm(store, name: str, dim: int) -> None:
    store.ones(name + ".g", (dim,))
    store.zeros(name + ".b", (dim,))


def init_transformer_stack(store, prefix: str, dim: int, ff: int, layers: int,
                           cross: bool = False) -> None:
    for i in range(layers):
        p = f"{prefix}{i}."
        init_layernorm(store, p + "ln1", dim)
        if cross:
            init_layernorm(store, p + "lnkv", dim)
        for proj in ("q", "k", "v", "o"):
            store.uniform(f"{p}attn.w{proj}", (dim, dim), dim)
            store.zeros(f"{p}attn.b{proj}", (dim,))
        init_layernorm(store, p + "ln2", dim)
        store.uniform(p + "ff.w1", (dim, ff), dim)
        store.zeros(p + "ff.b1", (ff,))
        store.uniform(p + "ff.w2", (ff, dim), ff)
        store.zeros(p + "ff.b2", (dim,))
    init_layernorm(store, prefix + "lnf", dim)
