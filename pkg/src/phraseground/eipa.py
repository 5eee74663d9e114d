"""Phrase adapter bypass: per-block adapters (self-attention, masked
cross-attention against the paired block's post-self-attention intermediate,
FFN) computed in a channel bottleneck, coupled bidirectionally with the
backbone, plus the adapter mask head built from the adapters' attention maps.

The cross-attention out-projection and the FFN output layer start at zero so
the bypass begins as a neutral perturbation: the injected prompts depend only
on the phrase stream until training moves them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .tensor import ContractViolation, Parameter, Tensor, no_grad


@dataclass
class AdapterState:
    block_index: int
    level: int
    hw: tuple
    phrase_out: Tensor        # R_l, [N, C_t]: next block's phrase stream
    injected: Tensor          # R_itm (full width), keys/values for the paired block
    attn_map: Tensor          # [N, H_l*W_l] post-softmax, head-averaged


class AdapterBlock(nn.Module):
    def __init__(self, c_t: int, c_v: int, bottleneck: int, heads: int, rng, dtype, ffn_ratio=2):
        super().__init__()
        self.zoom_in = nn.Linear(c_t, bottleneck, rng, dtype)
        self.ln_self = nn.LayerNorm(bottleneck, dtype)
        self.self_attn = nn.MultiHeadAttention(bottleneck, bottleneck, bottleneck, heads, rng, dtype)
        self.ln_cross = nn.LayerNorm(bottleneck, dtype)
        self.cross_attn = nn.MultiHeadAttention(bottleneck, c_v, bottleneck, heads, rng, dtype,
                                                zero_init_out=True)
        self.ln_ffn = nn.LayerNorm(bottleneck, dtype)
        self.ffn = nn.FeedForward(bottleneck, rng, dtype, ratio=ffn_ratio, zero_init_out=True)
        self.zoom_out = nn.Linear(bottleneck, c_t, rng, dtype)

    def __call__(self, r_prev: Tensor, f_itm: Tensor, attn_mask: np.ndarray | None):
        n = r_prev.shape[0]
        hw = f_itm.shape[0]
        if attn_mask is not None and attn_mask.shape != (n, hw):
            raise ContractViolation(f"attention mask {attn_mask.shape} != {(n, hw)}")
        r0 = self.zoom_in(r_prev)
        normed = self.ln_self(r0)
        s, _ = self.self_attn(normed, normed)
        r_itm = s + r0
        injected = self.zoom_out(r_itm) + r_prev
        c, attn_map = self.cross_attn(self.ln_cross(r_itm), f_itm, attn_mask)
        r_bar = c + r_itm
        r_out = self.ffn(self.ln_ffn(r_bar)) + r_bar
        phrase_out = self.zoom_out(r_out) + r_prev
        return phrase_out, injected, attn_map


class DynamicPromptProvider:
    """Coupled scheduling for one forward pass.

    Inside block l: the backbone's post-self-attention intermediate arrives
    here, the adapter updates the phrase stream and returns the injected
    prompts that the block's cross-attention will consume. The adapter's own
    attention mask is the running combination of the cross-attention maps
    observed so far (the current state of the mask prediction that the
    backbone head would make), thresholded at 0.5; blocks before the first
    observed map run unmasked.
    """

    def __init__(self, adapters: dict, phrase_embeddings: Tensor, diffusion_head,
                 image_hw: tuple, use_attention_mask: bool = True, identity: bool = False):
        self.adapters = adapters
        self.R = phrase_embeddings
        self.head = diffusion_head
        self.image_hw = image_hw
        self.use_attention_mask = use_attention_mask
        self.identity = identity
        self.states: list[AdapterState] = []
        self._phrase_at_block: dict[int, Tensor] = {}
        self._mask_num = None
        self._mask_den = 0.0

    def provide(self, block_index: int, block_level: int, hw, f_itm: Tensor):
        adapter = self.adapters.get(block_index)
        if adapter is None or self.identity or self.R is None or self.R.shape[0] == 0:
            self._phrase_at_block[block_index] = self.R
            return self.R
        mask = self._current_mask(hw) if self.use_attention_mask else None
        phrase_out, injected, attn_map = adapter(self.R, f_itm, mask)
        self.states.append(AdapterState(block_index, block_level, hw, phrase_out, injected, attn_map))
        self.R = phrase_out
        self._phrase_at_block[block_index] = phrase_out
        return injected

    def observe(self, block_output):
        """Fold a completed block's cross-attention map into the running mask."""
        if not self.use_attention_mask or block_output.attn_map is None:
            return
        with no_grad():
            h, w = block_output.hw
            n = block_output.attn_map.shape[1]
            maps = block_output.attn_map.data.T.reshape(n, h, w) * n
            up = ops.resize_nhw_np(maps, self.image_hw)
            weight = float(np.exp(self.head.block_logits.data[block_output.index]))
            if self._mask_num is None:
                self._mask_num = weight * up
            else:
                self._mask_num = self._mask_num + weight * up
            self._mask_den += weight

    def _current_mask(self, hw) -> np.ndarray | None:
        if self._mask_num is None:
            return None
        combo = self._mask_num / self._mask_den
        scale = float(self.head.calib_scale.data[0])
        bias = float(self.head.calib_bias.data[0])
        logits = ops.resize_nhw_np(combo, hw) * scale + bias
        return (logits > 0.0).reshape(logits.shape[0], -1)

    def phrase_at_block(self, block_index: int):
        """Latest phrase stream at or before the given block (for level taps)."""
        best = None
        for idx in sorted(self._phrase_at_block):
            if idx <= block_index:
                best = self._phrase_at_block[idx]
        return best if best is not None else self.R

    def finish(self):
        return self.states


class AdapterMaskHead(nn.Module):
    """Integrates the adapters' cross-attention maps into mask logits.

    Each map is rescaled to mean-one (so attention spread, not pixel count,
    determines its magnitude), upsampled to the image, combined with
    softmax-normalized learned block weights, and calibrated by a learned
    affine into logits. Per-block calibrated maps feed the deep supervision.
    """

    def __init__(self, n_blocks: int, dtype=np.float32):
        super().__init__()
        self.block_logits = Parameter(np.zeros(n_blocks, dtype=dtype))
        self.calib_scale = Parameter(np.asarray([1.0], dtype=dtype))
        self.calib_bias = Parameter(np.asarray([0.0], dtype=dtype))
        self.n_blocks = n_blocks

    def __call__(self, states: list[AdapterState], image_hw: tuple):
        if not states:
            raise ContractViolation("adapter mask head needs at least one adapter state")
        ups = []
        for state in states:
            h, w = state.hw
            n = state.attn_map.shape[0]
            maps = state.attn_map.reshape((n, h, w)) * float(h * w)
            ups.append(ops.bilinear_resize_nhw(maps, image_hw))
        idx = np.arange(len(states))
        weights = ops.softmax(self.block_logits[idx], axis=-1)
        combo = None
        for i, up in enumerate(ups):
            term = up * weights[i]
            combo = term if combo is None else combo + term
        per_block = [up * self.calib_scale + self.calib_bias for up in ups]
        integrated = combo * self.calib_scale + self.calib_bias
        return per_block, integrated
