"""Mask2Former-style decoder: phrase queries in fixed correspondence with the
annotated phrases cross-attend to pyramid levels (coarse to fine, round
robin) under attention masks taken from the previous stage's own mask
prediction; every stage's masks and class logits are kept for deep
supervision. Masks come from query/mask-feature inner products at quarter
resolution, upsampled to the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .tensor import Parameter, Tensor, no_grad, silu


@dataclass
class DecodeStage:
    mask_logits: Tensor          # [N, H0, W0]
    class_logits: Tensor         # [N, num_categories + 1]
    mask_low: np.ndarray         # [N, Hm, Wm] logits snapshot for attn masking


@dataclass
class MaskPrediction:
    masks_dif: Tensor | None
    masks_ada: Tensor | None
    masks_dec: Tensor
    class_logits: Tensor


class DecoderLayer(nn.Module):
    def __init__(self, c_m: int, heads: int, rng, dtype, ffn_ratio=2):
        super().__init__()
        self.ln_cross = nn.LayerNorm(c_m, dtype)
        self.cross = nn.MultiHeadAttention(c_m, c_m, c_m, heads, rng, dtype)
        self.ln_self = nn.LayerNorm(c_m, dtype)
        self.self_attn = nn.MultiHeadAttention(c_m, c_m, c_m, heads, rng, dtype)
        self.ln_ffn = nn.LayerNorm(c_m, dtype)
        self.ffn = nn.FeedForward(c_m, rng, dtype, ratio=ffn_ratio)

    def __call__(self, q: Tensor, kv: Tensor, mask: np.ndarray | None) -> Tensor:
        a, _ = self.cross(self.ln_cross(q), kv, mask)
        q = q + a
        normed = self.ln_self(q)
        s, _ = self.self_attn(normed, normed)
        q = q + s
        return q + self.ffn(self.ln_ffn(q))


class TransformerDecoder(nn.Module):
    def __init__(self, c_m: int, heads: int, n_layers: int, num_categories: int,
                 n_levels: int, rng, dtype, masked_attention: bool = True):
        super().__init__()
        self.n_layers = n_layers
        self.masked_attention = masked_attention
        self.layers = nn.ModuleList([DecoderLayer(c_m, heads, rng, dtype) for _ in range(n_layers)])
        self.mask_mlp_in = nn.Linear(c_m, c_m, rng, dtype)
        self.mask_mlp_out = nn.Linear(c_m, c_m, rng, dtype)
        self.class_head = nn.Linear(c_m, num_categories + 1, rng, dtype)
        self.level_embed = Parameter((rng.standard_normal((n_levels, c_m)) * 0.02).astype(dtype))
        self.c_m = c_m
        # coarse-to-fine round robin over pyramid levels
        self.level_cycle = list(range(n_levels - 1, -1, -1))

    def _predict(self, queries: Tensor, fm_tokens: Tensor, fm_hw, image_hw):
        e = self.mask_mlp_out(silu(self.mask_mlp_in(queries)))
        low = e @ fm_tokens.T                                  # [N, Hm*Wm]
        low_maps = low.reshape((low.shape[0],) + tuple(fm_hw))
        full = ops.bilinear_resize_nhw(low_maps, image_hw)
        cls = self.class_head(queries)
        return DecodeStage(full, cls, low_maps.data)

    def __call__(self, queries: Tensor, levels: list, f_m: Tensor, image_hw: tuple):
        hm, wm, cm = f_m.shape
        fm_tokens = f_m.reshape((hm * wm, cm))
        stages = [self._predict(queries, fm_tokens, (hm, wm), image_hw)]
        for d, layer in enumerate(self.layers):
            li = self.level_cycle[d % len(self.level_cycle)]
            feat = levels[li]
            hh, ww, _ = feat.shape
            kv = feat.reshape((hh * ww, cm))
            kv = kv + nn.sinusoidal_grid(hh, ww, cm, kv.dtype) + self.level_embed[li]
            if self.masked_attention:
                with no_grad():
                    attn_mask = ops.resize_nhw_np(stages[-1].mask_low, (hh, ww)) > 0.0
                attn_mask = attn_mask.reshape(attn_mask.shape[0], -1)
            else:
                attn_mask = None
            queries = layer(queries, kv, attn_mask)
            stages.append(self._predict(queries, fm_tokens, (hm, wm), image_hw))
        return stages, queries
