"""Multi-level mutual aggregation: one bi-attention pass over concatenated
multi-level pixel and phrase tokens, deformable-attention refinement on the
pixel side, self-attention refinement on the phrase side, and the fusion of
the refined 1/8-level feature with the quarter-resolution stream into the
mask feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .tensor import Parameter, Tensor, concat, silu
from .unet import Conv2d


@dataclass
class FeaturePyramid:
    levels: list            # three Tensors [H_i, W_i, C_m], finest first
    f2: Tensor              # quarter-resolution feature (pre-projection)

    @property
    def shapes(self):
        return [t.shape[:2] for t in self.levels]


class BiAttention(nn.Module):
    """One similarity matrix, two softmax axes: pixel-axis normalization
    updates phrases, phrase-axis normalization updates pixels."""

    def __init__(self, c_m: int, rng, dtype):
        super().__init__()
        self.wq = nn.Linear(c_m, c_m, rng, dtype)
        self.wk = nn.Linear(c_m, c_m, rng, dtype)
        self.wv_pix = nn.Linear(c_m, c_m, rng, dtype)
        self.wv_phr = nn.Linear(c_m, c_m, rng, dtype)
        self.scale = 1.0 / math.sqrt(c_m)

    def __call__(self, pixels: Tensor, phrases: Tensor):
        if phrases.shape[0] == 0:
            return pixels, phrases
        s = (self.wq(phrases) @ self.wk(pixels).T) * self.scale  # [3N, P]
        phrase_up = ops.softmax(s, axis=1) @ self.wv_pix(pixels)
        pixel_up = ops.softmax(s.T, axis=1) @ self.wv_phr(phrases)
        return pixels + pixel_up, phrases + phrase_up


class DeformableAttention(nn.Module):
    """Per-query learned offsets and weights over K points per level; sampled
    values are combined with weights softmaxed across levels x points."""

    def __init__(self, c_m: int, heads: int, points: int, n_levels: int, rng, dtype):
        super().__init__()
        if c_m % heads:
            raise ValueError(f"c_m {c_m} not divisible by {heads} heads")
        self.heads = heads
        self.points = points
        self.n_levels = n_levels
        self.d_head = c_m // heads
        self.value = nn.Linear(c_m, c_m, rng, dtype)
        n_off = heads * n_levels * points
        self.offset = nn.Linear(c_m, n_off * 2, rng, dtype, zero_init=True)
        self.offset.bias.data = self._initial_offsets(heads, n_levels, points).astype(dtype)
        self.weight = nn.Linear(c_m, n_off, rng, dtype, zero_init=True)
        self.out = nn.Linear(c_m, c_m, rng, dtype)

    @staticmethod
    def _initial_offsets(heads, n_levels, points) -> np.ndarray:
        """Small ring of starting points around each reference, per head."""
        off = np.zeros((heads, n_levels, points, 2))
        for h in range(heads):
            for k in range(points):
                ang = 2.0 * math.pi * (k / points + h / (heads * points))
                r = 0.002 * (k + 1) / points
                off[h, :, k, 0] = r * math.cos(ang)
                off[h, :, k, 1] = r * math.sin(ang)
        return off.reshape(-1)

    def __call__(self, level_tokens: list, level_shapes: list):
        queries = concat(level_tokens, axis=0)
        P = queries.shape[0]
        h, L, K, dh = self.heads, self.n_levels, self.points, self.d_head
        refs = np.concatenate(
            [nn.grid_reference_points(hh, ww, queries.dtype) for hh, ww in level_shapes], axis=0)
        offsets = self.offset(queries).reshape((P, h, L, K, 2)) + refs[:, None, None, None, :]
        weights = ops.softmax(self.weight(queries).reshape((P, h, L * K)), axis=-1)
        weights = weights.reshape((P, h, L, K))
        value_maps = []
        for tokens, (hh, ww) in zip(level_tokens, level_shapes):
            value_maps.append(self.value(tokens).reshape((hh, ww, h * dh)))
        head_outs = []
        for hi in range(h):
            acc = None
            for li in range(L):
                v_head = value_maps[li][:, :, hi * dh:(hi + 1) * dh]
                for k in range(K):
                    pts = offsets[:, hi, li, k, :]
                    sampled = ops.bilinear_sample(v_head, pts)
                    term = sampled * weights[:, hi, li, k].reshape((P, 1))
                    acc = term if acc is None else acc + term
            head_outs.append(acc)
        return self.out(concat(head_outs, axis=1))


class PhraseSelfAttention(nn.Module):
    def __init__(self, c_m: int, heads: int, rng, dtype, ffn_ratio=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(c_m, dtype)
        self.attn = nn.MultiHeadAttention(c_m, c_m, c_m, heads, rng, dtype)
        self.ln2 = nn.LayerNorm(c_m, dtype)
        self.ffn = nn.FeedForward(c_m, rng, dtype, ratio=ffn_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        normed = self.ln1(x)
        a, _ = self.attn(normed, normed)
        x = x + a
        return x + self.ffn(self.ln2(x))


class MaskFeatureFusion(nn.Module):
    """Upsample the refined 1/8 feature 2x, add the projected quarter-res
    stream, one conv on top."""

    def __init__(self, c_m: int, f2_channels: int, rng, dtype):
        super().__init__()
        self.proj_fine = nn.Linear(c_m, c_m, rng, dtype)
        self.proj_f2 = nn.Linear(f2_channels, c_m, rng, dtype)
        self.conv = Conv2d(c_m, c_m, rng, dtype)

    def __call__(self, fine: Tensor, f2: Tensor) -> Tensor:
        H, W, _ = fine.shape
        up = ops.bilinear_resize_hwc(fine, (H * 2, W * 2))
        fused = self.proj_fine(up) + self.proj_f2(f2)
        return self.conv(silu(fused))


class MultiLevelAggregator(nn.Module):
    """Projection of backbone taps to a common width, optional bi-attention /
    deformable / phrase self-attention refinement, and mask-feature fusion.

    With every toggle off this reduces to the projection-plus-fusion plumbing
    that the static baseline still needs.
    """

    def __init__(self, level_channels: list, c_t: int, c_m: int, f2_channels: int,
                 heads: int, rng, dtype, bi_attention=True, text_self_attention=True,
                 deformable=True, deformable_points=4, deformable_heads=4):
        super().__init__()
        self.n_levels = len(level_channels)
        self.c_m = c_m
        self.proj_levels = nn.ModuleList(
            [nn.Linear(c, c_m, rng, dtype) for c in level_channels])
        self.phrase_proj = nn.Linear(c_t, c_m, rng, dtype)
        self.level_embed = Parameter((rng.standard_normal((self.n_levels, c_m)) * 0.02).astype(dtype))
        self.use_bi = bi_attention
        self.use_text = text_self_attention
        self.use_deform = deformable
        if bi_attention:
            self.bi = BiAttention(c_m, rng, dtype)
        if deformable:
            self.deform = DeformableAttention(c_m, deformable_heads, deformable_points,
                                              self.n_levels, rng, dtype)
        if text_self_attention:
            self.text_attn = PhraseSelfAttention(c_m, heads, rng, dtype)
        self.fusion = MaskFeatureFusion(c_m, f2_channels, rng, dtype)

    def __call__(self, level_feats: list, phrase_levels: list, f2: Tensor):
        """level_feats: raw backbone taps [H_i,W_i,C_i]; phrase_levels: three
        [N,C_t] phrase streams; returns (refined level features, refined
        per-level phrases, mask feature)."""
        shapes = [t.shape[:2] for t in level_feats]
        tokens = []
        for i, feat in enumerate(level_feats):
            hh, ww, cc = feat.shape
            t = self.proj_levels[i](feat.reshape((hh * ww, cc)))
            t = t + nn.sinusoidal_grid(hh, ww, self.c_m, t.dtype) + self.level_embed[i]
            tokens.append(t)
        n = phrase_levels[0].shape[0]
        phr = [self.phrase_proj(p) + self.level_embed[i] for i, p in enumerate(phrase_levels)]

        pixel_cat = concat(tokens, axis=0)
        phrase_cat = concat(phr, axis=0)
        if self.use_bi:
            pixel_cat, phrase_cat = self.bi(pixel_cat, phrase_cat)
        sizes = [hh * ww for hh, ww in shapes]
        splits = np.cumsum(sizes)[:-1]
        level_tokens = [pixel_cat[int(a):int(b)] for a, b in
                        zip(np.concatenate([[0], splits]), np.concatenate([splits, [sum(sizes)]]))]
        if self.use_deform:
            delta = self.deform(level_tokens, shapes)
            pixel_cat = concat(level_tokens, axis=0) + delta
            level_tokens = [pixel_cat[int(a):int(b)] for a, b in
                            zip(np.concatenate([[0], splits]), np.concatenate([splits, [sum(sizes)]]))]
        if self.use_text and n > 0:
            phrase_cat = self.text_attn(phrase_cat)
        levels_hat = [t.reshape((hh, ww, self.c_m)) for t, (hh, ww) in zip(level_tokens, shapes)]
        phrases_hat = [phrase_cat[i * n:(i + 1) * n] for i in range(self.n_levels)] if n else \
            [phrase_cat for _ in range(self.n_levels)]
        f_m = self.fusion(levels_hat[0], f2)
        return levels_hat, phrases_hat, f_m
