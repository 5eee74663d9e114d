"""Full grounding model: caption encoding, prompted backbone with optional
adapter bypass, multi-level aggregation, transformer decoder, three mask
heads and the per-block class logits that deep supervision needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import ModelConfig
from .data import NUM_CATEGORIES, GroundingSample
from .decoder import DecodeStage, MaskPrediction, TransformerDecoder
from .eipa import AdapterBlock, AdapterMaskHead, AdapterState, DynamicPromptProvider
from .losses import DiffusionMaskHead
from .mlma import MultiLevelAggregator
from .tensor import ContractViolation, Tensor, no_grad, sigmoid
from .textenc import PhraseSet, TextEncoder, Vocabulary
from .unet import StaticPromptProvider, UNetBackbone


@dataclass
class ForwardResult:
    phrase_set: PhraseSet
    block_outputs: list
    adapter_states: list
    masks_dif: Tensor
    adapter_supervision: list      # [(mask logits [N,H0,W0], class logits [N,K+1])]
    masks_ada: Tensor | None
    decoder_stages: list           # DecodeStage, initial plus one per layer
    pyramid_levels: list
    mask_feature: Tensor

    @property
    def masks_dec(self) -> Tensor:
        return self.decoder_stages[-1].mask_logits

    @property
    def class_logits(self) -> Tensor:
        return self.decoder_stages[-1].class_logits

    @property
    def mask_prediction(self) -> MaskPrediction:
        return MaskPrediction(self.masks_dif, self.masks_ada, self.masks_dec, self.class_logits)


def ground_truth(sample: GroundingSample):
    """Stacked [N,H,W] target masks (zeros for ungrounded) plus metadata."""
    H, W, _ = sample.image.shape
    n = len(sample.phrases)
    masks = np.zeros((n, H, W), dtype=np.float32)
    cats = np.zeros(n, dtype=np.int64)
    grounded = np.zeros(n, dtype=bool)
    for i, ph in enumerate(sample.phrases):
        cats[i] = ph.category_id
        grounded[i] = ph.grounded
        if ph.mask is not None:
            masks[i] = ph.mask
    return masks, cats, grounded


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.np_dtype = np.float32 if cfg.dtype == "float32" else np.float64
        rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        dtype = self.np_dtype
        self.vocab = vocab or Vocabulary.default()
        self.text = TextEncoder(self.vocab, cfg.c_t, min(cfg.heads, cfg.c_t), rng, dtype,
                                max_words=cfg.max_words, n_max=cfg.n_max)
        self.backbone = UNetBackbone(cfg, rng, dtype)
        self.adapter_blocks = {}
        adapters = []
        for i, (role, level) in enumerate(self.backbone.block_roles):
            side = "encoder" if role == "enc" else "decoder"
            if cfg.adapter.position == "both" or cfg.adapter.position == side:
                adapter = AdapterBlock(cfg.c_t, cfg.channels[level], cfg.adapter.bottleneck,
                                       min(cfg.heads, cfg.adapter.bottleneck), rng, dtype,
                                       cfg.ffn_ratio)
                self.adapter_blocks[i] = adapter
                adapters.append(adapter)
        self.adapters = nn.ModuleList(adapters)
        self.diffusion_head = DiffusionMaskHead(cfg.n_blocks, dtype)
        self.adapter_head = AdapterMaskHead(max(len(adapters), 1), dtype)
        self.adapter_classifier = nn.Linear(cfg.c_t, NUM_CATEGORIES + 1, rng, dtype)
        tap_levels = sorted(self.backbone.tap_indices)
        self.mlma = MultiLevelAggregator(
            [cfg.channels[lv] for lv in tap_levels], cfg.c_t, cfg.c_m, cfg.f2_channels,
            min(cfg.heads, cfg.c_m), rng, dtype,
            bi_attention=cfg.mlma.enabled and cfg.mlma.bi_attention,
            text_self_attention=cfg.mlma.enabled and cfg.mlma.text_self_attention,
            deformable=cfg.mlma.enabled,
            deformable_points=cfg.mlma.deformable_points,
            deformable_heads=min(cfg.mlma.deformable_heads, cfg.c_m),
        )
        self.decoder = TransformerDecoder(cfg.c_m, min(cfg.heads, cfg.c_m),
                                          cfg.decoder.layers, NUM_CATEGORIES,
                                          len(tap_levels), rng, dtype,
                                          masked_attention=cfg.decoder.masked_attention)
        if cfg.freeze_backbone:
            self.backbone.freeze(True)
        if cfg.freeze_text_encoder:
            self.text.freeze(True)

    # ------------------------------------------------------------------
    def forward(self, sample: GroundingSample, prompting: str | None = None,
                time_step: int | None = None) -> ForwardResult:
        cfg = self.cfg
        if prompting is None:
            prompting = "dynamic" if self.adapter_blocks else "static"
        if prompting not in ("static", "dynamic", "identity"):
            raise ContractViolation(f"unknown prompting mode {prompting!r}")
        phrase_set = self.text.encode_sample(sample.caption, sample.phrases)
        if phrase_set.n == 0:
            raise ContractViolation("samples must carry at least one phrase")
        H, W, _ = sample.image.shape
        image = Tensor(np.asarray(sample.image, dtype=self.np_dtype))

        if prompting == "static" or not self.adapter_blocks:
            provider = StaticPromptProvider(phrase_set.embeddings)
        else:
            provider = DynamicPromptProvider(
                self.adapter_blocks, phrase_set.embeddings, self.diffusion_head,
                (H, W), use_attention_mask=cfg.adapter.use_attention_mask,
                identity=(prompting == "identity"),
            )
        block_outputs, _, f2 = self.backbone.forward(image, provider, time_step)
        masks_dif = self.diffusion_head(block_outputs, (H, W))

        adapter_states: list[AdapterState] = provider.finish()
        adapter_supervision = []
        masks_ada = None
        if adapter_states:
            per_block, masks_ada = self.adapter_head(adapter_states, (H, W))
            for state, block_masks in zip(adapter_states, per_block):
                cls = self.adapter_classifier(state.phrase_out)
                adapter_supervision.append((block_masks, cls))

        tap_levels = sorted(self.backbone.tap_indices)
        level_feats = [block_outputs[self.backbone.tap_indices[lv]].feature for lv in tap_levels]
        phrase_levels = []
        for lv in tap_levels:
            tap_idx = self.backbone.tap_indices[lv]
            if isinstance(provider, DynamicPromptProvider):
                phrase_levels.append(provider.phrase_at_block(tap_idx))
            else:
                phrase_levels.append(phrase_set.embeddings)
        levels_hat, phrases_hat, f_m = self.mlma(level_feats, phrase_levels, f2)

        queries = phrases_hat[-1]  # coarsest-level phrase stream seeds the decoder
        stages, _ = self.decoder(queries, levels_hat, f_m, (H, W))
        return ForwardResult(
            phrase_set=phrase_set,
            block_outputs=block_outputs,
            adapter_states=adapter_states,
            masks_dif=masks_dif,
            adapter_supervision=adapter_supervision,
            masks_ada=masks_ada,
            decoder_stages=stages,
            pyramid_levels=levels_hat,
            mask_feature=f_m,
        )

    # ------------------------------------------------------------------
    def predict_probs(self, sample: GroundingSample, head: str = "decoder") -> np.ndarray:
        """Per-phrase mask probabilities [N, H, W] from the chosen head."""
        if head == "gt":
            masks, _, _ = ground_truth(sample)
            return masks
        with no_grad():
            result = self.forward(sample)
            if head == "decoder":
                logits = result.masks_dec
            elif head == "adapter":
                if result.masks_ada is None:
                    raise ContractViolation("adapter head unavailable: no adapters in this model")
                logits = result.masks_ada
            elif head == "diffusion":
                logits = result.masks_dif
            else:
                raise ContractViolation(f"unknown head {head!r}")
            return sigmoid(logits).data

    def summary(self) -> dict:
        groups = {
            "text_encoder": self.text.n_parameters(),
            "backbone": self.backbone.n_parameters(),
            "adapters": sum(a.n_parameters() for a in self.adapters),
            "mask_heads": (self.diffusion_head.n_parameters() + self.adapter_head.n_parameters()
                           + self.adapter_classifier.n_parameters()),
            "mlma": self.mlma.n_parameters(),
            "decoder": self.decoder.n_parameters(),
        }
        groups["total"] = sum(groups.values())
        return groups
