"""Qualitative figures: per-pixel argmax-phrase colorization of adapter
cross-attention maps across blocks, and predicted-vs-ground-truth mask
overlays, written as PNG files.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics, ops
from .model import GroundingModel
from .tensor import no_grad

_CMAP = plt.get_cmap("tab10")


def _phrase_colors(n: int) -> np.ndarray:
    return np.asarray([_CMAP(i % 10)[:3] for i in range(n)])


def _phrase_label(sample, idx: int) -> str:
    s, e = sample.phrases[idx].word_span
    return " ".join(sample.caption[s:e])


def attention_panels(model: GroundingModel, sample, out_path: str) -> str:
    """One panel per adapter block: each pixel colored by its argmax phrase
    (phrase-axis softmax over the block's cross-attention map)."""
    with no_grad():
        result = model.forward(sample)
    states = result.adapter_states
    if not states:
        raise ValueError("model has no adapters; nothing to visualize")
    n = len(sample.phrases)
    colors = _phrase_colors(n)
    cols = min(len(states), 5)
    rows = (len(states) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i, state in enumerate(states):
        h, w = state.hw
        maps = state.attn_map.data.reshape(n, h, w)
        z = maps - maps.max(axis=0, keepdims=True)
        soft = np.exp(z)
        soft = soft / soft.sum(axis=0, keepdims=True)
        assign = soft.argmax(axis=0)
        panel = colors[assign]
        ax = axes[i // cols][i % cols]
        ax.imshow(panel, interpolation="nearest")
        ax.set_title(f"block {state.block_index} ({h}x{w})", fontsize=8)
    handles = [plt.Line2D([0], [0], color=colors[j], lw=4) for j in range(n)]
    fig.legend(handles, [_phrase_label(sample, j) for j in range(n)],
               loc="lower center", ncol=min(n, 4), fontsize=7)
    fig.suptitle("adapter cross-attention: argmax phrase per pixel", fontsize=10)
    fig.tight_layout(rect=(0, 0.08, 1, 0.96))
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _overlay(image: np.ndarray, masks: np.ndarray, colors: np.ndarray, alpha=0.55) -> np.ndarray:
    out = image.copy()
    for i in range(masks.shape[0]):
        m = masks[i].astype(bool)
        out[m] = (1 - alpha) * out[m] + alpha * colors[i]
    return np.clip(out, 0, 1)


def prediction_overlay(model: GroundingModel, sample, out_path: str,
                       head: str = "decoder") -> str:
    """Side-by-side predicted vs ground-truth mask overlays."""
    probs = model.predict_probs(sample, head=head)
    preds = metrics.binarize(probs)
    grounded = [i for i, ph in enumerate(sample.phrases) if ph.grounded]
    n = len(sample.phrases)
    colors = _phrase_colors(n)
    gt = np.zeros_like(preds)
    for i in grounded:
        gt[i] = sample.phrases[i].mask
    pred_sel = np.zeros_like(preds)
    for i in grounded:
        pred_sel[i] = preds[i]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.4))
    axes[0].imshow(sample.image)
    axes[0].set_title("image", fontsize=9)
    axes[1].imshow(_overlay(sample.image, pred_sel, colors))
    axes[1].set_title(f"prediction ({head} head)", fontsize=9)
    axes[2].imshow(_overlay(sample.image, gt, colors))
    axes[2].set_title("ground truth", fontsize=9)
    for ax in axes:
        ax.axis("off")
    handles = [plt.Line2D([0], [0], color=colors[j], lw=4) for j in grounded]
    fig.legend(handles, [_phrase_label(sample, j) for j in grounded],
               loc="lower center", ncol=min(len(grounded), 3), fontsize=7)
    fig.tight_layout(rect=(0, 0.1, 1, 1))
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def visualize_sample(model: GroundingModel, sample, out_dir: str, tag: str = "sample",
                     head: str = "decoder") -> list:
    os.makedirs(out_dir, exist_ok=True)
    files = []
    files.append(prediction_overlay(model, sample, os.path.join(out_dir, f"{tag}_overlay.png"),
                                    head=head))
    if model.adapter_blocks:
        files.append(attention_panels(model, sample, os.path.join(out_dir, f"{tag}_attention.png")))
    return files
