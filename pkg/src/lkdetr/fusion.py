"""Feature fusion: channel-unifying FPN, coordinate attention, and a
multi-scale deformable-attention encoder.

The FPN adapts each pyramid level to a shared width D (1x1 conv + norm),
merges top-down with nearest x2 upsampling, and smooths with a 3x3 conv.
Coordinate attention gates each level with direction-aware per-channel
weights. The encoder flattens all levels into one token sequence and runs
four identical layers of deformable self-attention + FFN, where every token
samples K offset points per head on every level around its own normalized
cell center.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, ShapeError, Tensor
from .layers import Conv2d, LayerNorm, LayerNorm2d, Linear, Mlp, Module, trunc_normal_param


class FeatureFusionFPN(Module):
    """Unify level channels to out_dim, fuse top-down, smooth per level."""

    def __init__(self, in_channels, out_dim, rng):
        self.adapts = [Conv2d(c, out_dim, 1, rng.split(f"adapt{i}"))
                       for i, c in enumerate(in_channels)]
        self.norms = [LayerNorm2d(out_dim) for _ in in_channels]
        self.smooths = [Conv2d(out_dim, out_dim, 3, rng.split(f"smooth{i}"),
                               padding=1) for i, _ in enumerate(in_channels)]

    def __call__(self, levels):
        if len(levels) != len(self.adapts):
            raise ShapeError(
                f"FPN built for {len(self.adapts)} levels, got {len(levels)}")
        adapted = [norm(adapt(x))
                   for x, adapt, norm in zip(levels, self.adapts, self.norms)]
        merged = [None] * len(adapted)
        merged[-1] = adapted[-1]
        for i in range(len(adapted) - 2, -1, -1):
            target_hw = (adapted[i].shape[-2], adapted[i].shape[-1])
            up = ag.upsample_nearest2x(merged[i + 1], out_hw=target_hw)
            merged[i] = ag.add(adapted[i], up)
        return [smooth(m) for m, smooth in zip(merged, self.smooths)]


class CoordinateAttention(Module):
    """Direction-aware gating from width- and height-pooled descriptors.

    Width-pooled z^h [D,H,1] and height-pooled z^w [D,1,W] are concatenated
    along the spatial axis, squeezed through a 1x1 conv + GELU, split back,
    and expanded to sigmoid gates g^h, g^w; the output is
    y[c,i,j] = x[c,i,j] * g^h[c,i] * g^w[c,j].
    """

    def __init__(self, dim, rng, reduction=8):
        mid = max(8, dim // reduction)
        self.reduce = Conv2d(dim, mid, 1, rng.split("reduce"))
        self.expand_h = Conv2d(mid, dim, 1, rng.split("h"))
        self.expand_w = Conv2d(mid, dim, 1, rng.split("w"))

    def __call__(self, x):
        h, w = x.shape[-2], x.shape[-1]
        zh = ag.mean(x, axis=2, keepdims=True)           # [D,H,1]
        zw = ag.mean(x, axis=1, keepdims=True)           # [D,1,W]
        zw_col = ag.transpose(zw, (0, 2, 1))             # [D,W,1]
        f = ag.gelu(self.reduce(ag.concat([zh, zw_col], axis=1)))
        fh, fw = ag.split(f, [h, w], axis=1)
        gh = ag.sigmoid(self.expand_h(fh))               # [D,H,1]
        gw = ag.transpose(ag.sigmoid(self.expand_w(fw)), (0, 2, 1))  # [D,1,W]
        return ag.mul(ag.mul(x, gh), gw)


def sine_position_encoding(shapes, dim, temperature=10000.0):
    """Flattened 2-d sine/cosine table for a list of (H, W) level shapes.

    Returns ([sum(H*W), dim] array, [sum(H*W)] level-id array). dim must be
    divisible by 4 (two axes x sin/cos); values lie in [-1, 1] and the table
    is a pure function of the shapes.
    """
    if dim % 4 != 0:
        raise ConfigError(f"positional encoding dim {dim} must be divisible by 4")
    nf = dim // 4
    freqs = temperature ** (-np.arange(nf, dtype=np.float64) / nf)
    tables = []
    level_ids = []
    for lvl, (h, w) in enumerate(shapes):
        ys = (np.arange(h, dtype=np.float64) + 0.5) / h * (2.0 * math.pi)
        xs = (np.arange(w, dtype=np.float64) + 0.5) / w * (2.0 * math.pi)
        ang_y = ys[:, None] * freqs[None, :]
        ang_x = xs[:, None] * freqs[None, :]
        enc_y = np.concatenate([np.sin(ang_y), np.cos(ang_y)], axis=1)  # [H,2nf]
        enc_x = np.concatenate([np.sin(ang_x), np.cos(ang_x)], axis=1)  # [W,2nf]
        full = np.concatenate(
            [np.repeat(enc_y[:, None, :], w, axis=1),
             np.repeat(enc_x[None, :, :], h, axis=0)], axis=2)
        tables.append(full.reshape(h * w, dim))
        level_ids.append(np.full(h * w, lvl, dtype=np.int64))
    table = np.concatenate(tables, axis=0).astype(ag.get_default_dtype())
    return table, np.concatenate(level_ids, axis=0)


def grid_reference_points(shapes):
    """Normalized (x, y) cell centers per token, broadcast to all levels.

    Returns [sum(H*W), L, 2]: each token keeps its own center coordinates at
    every level.
    """
    num_levels = len(shapes)
    refs = []
    for h, w in shapes:
        xs = (np.arange(w, dtype=np.float64) + 0.5) / w
        ys = (np.arange(h, dtype=np.float64) + 0.5) / h
        grid = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(h * w, 2)
        refs.append(grid)
    pts = np.concatenate(refs, axis=0)
    return np.repeat(pts[:, None, :], num_levels, axis=1).astype(
        ag.get_default_dtype())


class DeformableAttention(Module):
    """Multi-scale deformable attention over a flattened level sequence.

    Each query emits heads*levels*points sampling offsets (added to its
    reference point in normalized coordinates) and as many attention logits,
    softmax-normalized jointly over (levels, points). Offset and weight
    projections start at zero so the op begins as uniform reference-point
    averaging.
    """

    def __init__(self, dim, heads, points, levels, rng):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.points = points
        self.levels = levels
        self.value_proj = Linear(dim, dim, rng.split("value"))
        self.offset_proj = Linear(dim, heads * levels * points * 2,
                                  rng.split("offset"), zero_init=True)
        self.weight_proj = Linear(dim, heads * levels * points,
                                  rng.split("weight"), zero_init=True)
        self.out_proj = Linear(dim, dim, rng.split("out"))

    def __call__(self, queries, reference_points, value_tokens, level_shapes):
        q, d = queries.shape
        m, k, nl = self.heads, self.points, self.levels
        cv = d // m
        if len(level_shapes) != nl:
            raise ShapeError(
                f"attention built for {nl} levels, got {len(level_shapes)}")

        values = self.value_proj(value_tokens)
        sizes = [h * w for h, w in level_shapes]
        value_levels = ag.split(values, sizes, axis=0)

        offsets = ag.reshape(self.offset_proj(queries), (q, m, nl, k, 2))
        ref = reference_points if isinstance(reference_points, Tensor) \
            else Tensor(reference_points)
        ref_b = ag.broadcast_to(
            ag.reshape(ref, (q, 1, nl, 1, 2)), (q, m, nl, k, 2))
        locs = ag.add(ref_b, offsets)

        logits = ag.reshape(self.weight_proj(queries), (q, m, nl * k))
        attn = ag.reshape(ag.softmax(logits, axis=-1), (q, m, nl, k))

        loc_levels = ag.split(locs, [1] * nl, axis=2)
        attn_levels = ag.split(attn, [1] * nl, axis=2)
        acc = None
        for lvl, (h, w) in enumerate(level_shapes):
            vmap = ag.transpose(
                ag.reshape(value_levels[lvl], (h, w, m, cv)), (2, 3, 0, 1))
            pts = ag.reshape(
                ag.transpose(ag.reshape(loc_levels[lvl], (q, m, k, 2)),
                             (1, 0, 2, 3)), (m, q * k, 2))
            sampled = ag.reshape(
                ag.bilinear_sample_grouped(vmap, pts), (m, q, k, cv))
            wgt = ag.reshape(
                ag.transpose(ag.reshape(attn_levels[lvl], (q, m, k)),
                             (1, 0, 2)), (m, q, k, 1))
            contrib = ag.sum_(ag.mul(sampled, wgt), axis=2)  # [m,q,cv]
            acc = contrib if acc is None else ag.add(acc, contrib)
        out = ag.reshape(ag.transpose(acc, (1, 0, 2)), (q, d))
        return self.out_proj(out)


class FeedForward(Module):
    def __init__(self, dim, rng, hidden=None):
        hidden = hidden or 4 * dim
        self.fc1 = Linear(dim, hidden, rng.split("fc1"))
        self.fc2 = Linear(hidden, dim, rng.split("fc2"))

    def __call__(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, dim, heads, points, levels, rng):
        self.attn = DeformableAttention(dim, heads, points, levels,
                                        rng.split("attn"))
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng.split("ffn"))
        self.norm2 = LayerNorm(dim)

    def __call__(self, tokens, pos, refs, level_shapes):
        q = ag.add(tokens, pos)
        attended = self.attn(q, refs, tokens, level_shapes)
        tokens = self.norm1(ag.add(tokens, attended))
        tokens = self.norm2(ag.add(tokens, self.ffn(tokens)))
        return tokens


class Encoder(Module):
    """Flatten a uniform-width pyramid and run deformable self-attention."""

    def __init__(self, dim, heads, points, levels, num_layers, rng):
        self.level_embed = trunc_normal_param((levels, dim), rng.split("lvl"))
        self.layers = [EncoderLayer(dim, heads, points, levels,
                                    rng.split(f"layer{i}"))
                       for i in range(num_layers)]
        self.dim = dim

    def positional_tokens(self, level_shapes):
        """Sine table plus learned level embedding, as a [N, D] tensor."""
        table, level_ids = sine_position_encoding(level_shapes, self.dim)
        rows = ag.split(self.level_embed, [1] * len(level_shapes), axis=0)
        parts = []
        for lvl, (h, w) in enumerate(level_shapes):
            parts.append(ag.broadcast_to(rows[lvl], (h * w, self.dim)))
        return ag.add(Tensor(table), ag.concat(parts, axis=0)), level_ids

    def __call__(self, levels):
        for x in levels:
            if x.shape[0] != self.dim:
                raise ShapeError(
                    f"encoder expects {self.dim}-channel levels, got {x.shape}")
        level_shapes = [(x.shape[-2], x.shape[-1]) for x in levels]
        tokens = ag.concat(
            [ag.transpose(ag.reshape(x, (self.dim, h * w)), (1, 0))
             for x, (h, w) in zip(levels, level_shapes)], axis=0)
        pos, _ = self.positional_tokens(level_shapes)
        refs = Tensor(grid_reference_points(level_shapes))
        for layer in self.layers:
            tokens = layer(tokens, pos, refs, level_shapes)
        return tokens, level_shapes


def coordinate_attention_param_count(dim, reduction=8):
    """Closed-form census for one coordinate-attention module."""
    mid = max(8, dim // reduction)
    reduce = dim * mid + mid
    expand = 2 * (mid * dim + dim)
    return reduce + expand
