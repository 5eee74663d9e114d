"""Miniature latent UNet: strided-conv latent encoder (1/8 by default, 4
channels), blocks of ResBlock + transformer (self-attention, text
cross-attention, FFN), encoder/decoder skip concatenation, and a small
upsampling decoder that produces the quarter-resolution mask feature input.

A block's transformer exposes its post-self-attention intermediate; the
prompt provider is consulted right there, which is what lets the adapter
bypass couple bidirectionally with the backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .tensor import ContractViolation, Parameter, Tensor, concat, silu


@dataclass
class BlockOutputs:
    index: int
    level: int
    hw: tuple                 # (H_l, W_l)
    feature: Tensor           # [H_l, W_l, C]
    f_itm: Tensor             # [H_l*W_l, C], captured right after self-attention
    attn_map: Tensor | None   # [H_l*W_l, N] post-softmax, head-averaged


class StaticPromptProvider:
    """Static prompting: the same phrase embeddings condition every block."""

    def __init__(self, phrase_embeddings: Tensor | None):
        self.embeddings = phrase_embeddings

    def provide(self, block_index: int, block_level: int, hw, f_itm: Tensor):
        return self.embeddings

    def observe(self, block_output):
        pass

    def finish(self):
        return []


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, rng, dtype, kernel=3, stride=1, bias=True):
        super().__init__()
        fan_in = kernel * kernel * c_in
        self.weight = Parameter(nn.uniform_init(rng, (kernel, kernel, c_in, c_out), fan_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResBlock(nn.Module):
    """Conv biases ahead of a norm are dead weight, so conv1 goes without;
    time conditioning is added after norm2 for the same reason (per-channel
    groups would otherwise normalize the embedding away entirely)."""

    def __init__(self, c_in, c_out, temb_dim, rng, dtype, groups=8):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.norm1 = nn.GroupNorm(c_in, groups, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, rng, dtype, bias=False)
        self.time_proj = nn.Linear(temb_dim, c_out, rng, dtype)
        self.norm2 = nn.GroupNorm(c_out, groups, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, rng, dtype)
        self.skip = Conv2d(c_in, c_out, rng, dtype, kernel=1) if c_in != c_out else None

    def __call__(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        h = self.conv2(silu(self.norm2(h) + self.time_proj(t_emb)))
        return h + (self.skip(x) if self.skip is not None else x)


class UNetBlock(nn.Module):
    """ResBlock -> self-attention -> (provider) -> cross-attention -> FFN."""

    def __init__(self, index, level, c_in, c_out, c_t, heads, temb_dim, rng, dtype,
                 ffn_ratio=2, groups=8):
        super().__init__()
        self.index = index
        self.level = level
        self.res = ResBlock(c_in, c_out, temb_dim, rng, dtype, groups)
        self.ln_self = nn.LayerNorm(c_out, dtype)
        self.self_attn = nn.MultiHeadAttention(c_out, c_out, c_out, heads, rng, dtype)
        self.ln_cross = nn.LayerNorm(c_out, dtype)
        self.cross_attn = nn.MultiHeadAttention(c_out, c_t, c_out, heads, rng, dtype)
        self.ln_ffn = nn.LayerNorm(c_out, dtype)
        self.ffn = nn.FeedForward(c_out, rng, dtype, ratio=ffn_ratio)

    def __call__(self, x: Tensor, t_emb: Tensor, provider) -> BlockOutputs:
        h = self.res(x, t_emb)
        H, W, C = h.shape
        tokens = h.reshape((H * W, C))
        normed = self.ln_self(tokens)
        a, _ = self.self_attn(normed, normed)
        tokens = tokens + a
        f_itm = tokens
        prompts = provider.provide(self.index, self.level, (H, W), f_itm)
        attn_map = None
        if prompts is not None and prompts.shape[0] > 0:
            c, attn_map = self.cross_attn(self.ln_cross(tokens), prompts)
            tokens = tokens + c
        tokens = tokens + self.ffn(self.ln_ffn(tokens))
        return BlockOutputs(self.index, self.level, (H, W), tokens.reshape((H, W, C)),
                            f_itm, attn_map)


class Downsample(nn.Module):
    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels, rng, dtype, stride=2)

    def __call__(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels, rng, dtype)

    def __call__(self, x):
        H, W, _ = x.shape
        return self.conv(ops.bilinear_resize_hwc(x, (H * 2, W * 2)))


class LatentEncoder(nn.Module):
    """Strided convolutions standing in for the VAE encoder: /stride, 4 channels."""

    def __init__(self, stride, rng, dtype, hidden=16, latent_channels=4):
        super().__init__()
        if stride & (stride - 1) or stride < 2:
            raise ContractViolation(f"latent stride must be a power of two >= 2, got {stride}")
        self.stride = stride
        steps = int(np.log2(stride))
        convs = []
        c_in = 3
        for i in range(steps):
            c_out = latent_channels if i == steps - 1 else hidden
            convs.append(Conv2d(c_in, c_out, rng, dtype, stride=2))
            c_in = c_out
        self.convs = nn.ModuleList(convs)

    def __call__(self, image: Tensor) -> Tensor:
        H, W, _ = image.shape
        if H % self.stride or W % self.stride:
            raise ContractViolation(f"image {H}x{W} not divisible by latent stride {self.stride}")
        x = image
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = silu(x)
        return x


class LatentDecoder(nn.Module):
    """2x upsampling conv decoder: UNet output -> half-latent-stride feature."""

    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.up = Upsample(c_in, rng, dtype)
        self.out = Conv2d(c_in, c_out, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(silu(self.up(x)))


class UNetBackbone(nn.Module):
    """Block layout is a list of pyramid levels per section; skip connections
    pair decoder blocks with same-level encoder outputs, LIFO."""

    def __init__(self, cfg, rng, dtype):
        super().__init__()
        self.cfg = cfg
        channels = cfg.channels
        temb = max(channels)
        self.temb_dim = temb
        self.time_embed = Parameter((rng.standard_normal((cfg.time_steps, temb)) * 0.02).astype(dtype))
        self.latent_encoder = LatentEncoder(cfg.latent_stride, rng, dtype)

        roles = ([("enc", lv) for lv in cfg.encoder_levels]
                 + [("mid", lv) for lv in cfg.middle_levels]
                 + [("dec", lv) for lv in cfg.decoder_levels])
        self.block_roles = roles
        blocks = []
        resamples = []
        skip_sources: dict[int, int] = {}  # decoder block index -> encoder block index
        enc_stack: list[tuple[int, int]] = []  # (block index, level)
        prev_level = 0
        prev_c = 4  # latent channels
        for i, (role, level) in enumerate(roles):
            steps = level - prev_level
            ramp = []
            for _ in range(abs(steps)):
                ramp.append(Downsample(prev_c, rng, dtype) if steps > 0 else Upsample(prev_c, rng, dtype))
            resamples.append(nn.ModuleList(ramp))
            c_in = prev_c
            if role == "dec" and enc_stack and enc_stack[-1][1] == level:
                src, _ = enc_stack.pop()
                skip_sources[i] = src
                c_in += blocks[src].res.c_out
            block = UNetBlock(i, level, c_in, channels[level], cfg.c_t, cfg.heads,
                              temb, rng, dtype, cfg.ffn_ratio, cfg.norm_groups)
            blocks.append(block)
            if role == "enc":
                enc_stack.append((i, level))
            prev_level = level
            prev_c = channels[level]
        # trailing resamples bring the stream back to level 0 for the decoder head
        tail = []
        for _ in range(prev_level):
            tail.append(Upsample(prev_c, rng, dtype))
        self.blocks = nn.ModuleList(blocks)
        self.resamples = nn.ModuleList(resamples)
        self.tail = nn.ModuleList(tail)
        self.skip_sources = skip_sources
        self.latent_decoder = LatentDecoder(prev_c, cfg.f2_channels, rng, dtype)
        self.tap_indices = self._compute_taps(roles)
        self._assert_skip_structure()

    @staticmethod
    def _compute_taps(roles) -> dict[int, int]:
        """Last block at each pyramid level, preferring later (decoder) blocks."""
        taps: dict[int, int] = {}
        for i, (_, level) in enumerate(roles):
            taps[level] = i
        return taps

    def _assert_skip_structure(self):
        for dec_idx, src_idx in self.skip_sources.items():
            dec = self.blocks[dec_idx]
            src = self.blocks[src_idx]
            expected = None
            # input channels = incoming stream + skip, as configured
            prev_c = 4 if dec_idx == 0 else self.blocks[dec_idx - 1].res.c_out
            expected = prev_c + src.res.c_out
            got = dec.res.c_in
            if expected != got:
                raise ContractViolation(
                    f"block {dec_idx}: conv-in {got} != stream {prev_c} + skip {src.res.c_out}")

    def forward(self, image: Tensor, provider, time_step: int | None = None):
        t = self.cfg.time_step if time_step is None else time_step
        if not (0 <= t < self.cfg.time_steps):
            raise ContractViolation(f"time step {t} outside table of {self.cfg.time_steps}")
        t_emb = self.time_embed[t]
        x = self.latent_encoder(image)
        outputs: list[BlockOutputs] = []
        saved: dict[int, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for resample in self.resamples[i]:
                x = resample(x)
            if i in self.skip_sources:
                x = concat([x, saved[self.skip_sources[i]]], axis=2)
            out = block(x, t_emb, provider)
            provider.observe(out)
            outputs.append(out)
            if self.block_roles[i][0] == "enc":
                saved[i] = out.feature
            x = out.feature
        for up in self.tail:
            x = up(x)
        f2 = self.latent_decoder(x)
        return outputs, x, f2
