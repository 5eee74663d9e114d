"""The backbone mask head and the three-term training loss.

Mask supervision: the backbone head gets plain per-pixel binary
cross-entropy over grounded phrases; adapter blocks and decoder stages get
the mask-classification combination (class NLL + weighted BCE + Dice), with
ungrounded phrases contributing only a down-weighted no-object class term.
Totals are the plain sum of the three families, and every intermediate
supervised unit (adapter block, decoder stage) contributes its own term.

Note the per-pixel mask cross-entropy here is the full two-sided form; the
one-sided variant (positive-pixel term only) is degenerate, since all-ones
predictions minimize it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, ops
from .tensor import ContractViolation, Parameter, Tensor

LOGIT_CLAMP = 15.0
LAMBDA_BCE = 5.0
LAMBDA_DICE = 5.0
NO_OBJECT_WEIGHT = 0.1
DICE_SMOOTH = 1.0


class DiffusionMaskHead(nn.Module):
    """Weighted summation of the backbone's post-softmax cross-attention maps.

    Maps are transposed to phrase-major, rescaled to mean one (uniform
    attention over phrases maps to exactly 1), upsampled to the image,
    combined with softmax-normalized learned per-block weights and passed
    through a learned affine calibration to logits.
    """

    def __init__(self, n_blocks: int, dtype=np.float32):
        super().__init__()
        self.block_logits = Parameter(np.zeros(n_blocks, dtype=dtype))
        self.calib_scale = Parameter(np.asarray([1.0], dtype=dtype))
        self.calib_bias = Parameter(np.asarray([0.0], dtype=dtype))
        self.n_blocks = n_blocks

    def __call__(self, block_outputs, image_hw: tuple) -> Tensor:
        contributing = [b for b in block_outputs if b.attn_map is not None]
        if not contributing:
            raise ContractViolation("no cross-attention maps to build masks from")
        idx = np.asarray([b.index for b in contributing])
        weights = ops.softmax(self.block_logits[idx], axis=-1)
        combo = None
        for i, b in enumerate(contributing):
            h, w = b.hw
            n = b.attn_map.shape[1]
            maps = b.attn_map.T.reshape((n, h, w)) * float(n)
            up = ops.bilinear_resize_nhw(maps, image_hw) * weights[i]
            combo = up if combo is None else combo + up
        return combo * self.calib_scale + self.calib_bias


@dataclass
class LossReport:
    loss_dif: float
    loss_ada: float
    loss_dec: float
    total: float
    parts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def as_row(self) -> dict:
        row = {"loss_dif": self.loss_dif, "loss_ada": self.loss_ada,
               "loss_dec": self.loss_dec, "total": self.total}
        row.update(self.parts)
        return row


def mask_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean two-sided BCE per phrase row; logits clamped for numeric safety."""
    clamped = ops.bce_with_logits(
        _clamp(logits), np.asarray(targets, dtype=logits.dtype))
    return clamped.mean(axis=tuple(range(1, logits.ndim)))


def _clamp(logits: Tensor) -> Tensor:
    from .tensor import clip

    return clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)


def dice_per_phrase(logits: Tensor, targets: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    from .tensor import sigmoid

    y = sigmoid(_clamp(logits))
    t = np.asarray(targets, dtype=logits.dtype)
    axes = tuple(range(1, logits.ndim))
    inter = (y * t).sum(axis=axes)
    denom = y.sum(axis=axes) + t.sum(axis=axes)
    return 1.0 - (inter * 2.0 + smooth) / (denom + smooth)


def loss_dif(mask_logits: Tensor, gt_masks: np.ndarray, grounded: np.ndarray):
    """Per-pixel BCE averaged over grounded phrases' full pixel grids."""
    grounded = np.asarray(grounded, dtype=bool)
    if not grounded.any():
        return Tensor(np.zeros((), dtype=mask_logits.dtype)), ["loss_dif: no grounded phrases"]
    sel = np.flatnonzero(grounded)
    logits = mask_logits[sel]
    targets = np.asarray(gt_masks, dtype=mask_logits.dtype)[sel]
    return ops.bce_with_logits(_clamp(logits), targets).mean(), []


def loss_mask_cls(mask_logits: Tensor, class_logits: Tensor, gt_masks: np.ndarray,
                  categories: np.ndarray, grounded: np.ndarray,
                  lambda_bce: float = LAMBDA_BCE, lambda_dice: float = LAMBDA_DICE):
    """Mask-classification loss: sum over phrases of class NLL plus, for
    grounded phrases, weighted BCE and Dice on the mask; ungrounded phrases
    target the no-object class at reduced weight."""
    n, k_plus_1 = class_logits.shape
    categories = np.asarray(categories, dtype=np.int64)
    grounded = np.asarray(grounded, dtype=bool)
    if ((categories < 0) | (categories >= k_plus_1 - 1)).any():
        raise ContractViolation("category id out of range")
    targets = np.where(grounded, categories, k_plus_1 - 1)
    weights = np.where(grounded, 1.0, NO_OBJECT_WEIGHT).astype(class_logits.dtype)
    logp = ops.log_softmax(class_logits, axis=-1)
    nll = -(logp[np.arange(n), targets] * weights).sum()
    parts = {"cls": float(nll.data)}
    total = nll
    if grounded.any():
        sel = np.flatnonzero(grounded)
        logits = mask_logits[sel]
        targets_m = np.asarray(gt_masks, dtype=mask_logits.dtype)[sel]
        bce = mask_bce(logits, targets_m).sum() * lambda_bce
        dice = dice_per_phrase(logits, targets_m).sum() * lambda_dice
        total = total + bce + dice
        parts["bce"] = float(bce.data)
        parts["dice"] = float(dice.data)
    else:
        parts["bce"] = 0.0
        parts["dice"] = 0.0
    return total, parts


def total_loss(result, gt_masks: np.ndarray, categories: np.ndarray, grounded: np.ndarray):
    """Sum of the three loss families with deep supervision: the backbone
    head term, one mask-cls term per adapter block, one per decoder stage."""
    dif, warnings = loss_dif(result.masks_dif, gt_masks, grounded)
    parts = {"dif_bce": float(dif.data)}

    ada = Tensor(np.zeros((), dtype=dif.dtype))
    ada_parts = {"cls": 0.0, "bce": 0.0, "dice": 0.0}
    for block_masks, block_cls in result.adapter_supervision:
        term, p = loss_mask_cls(block_masks, block_cls, gt_masks, categories, grounded)
        ada = ada + term
        for key in ada_parts:
            ada_parts[key] += p.get(key, 0.0)
    parts.update({f"ada_{k}": v for k, v in ada_parts.items()})

    dec = Tensor(np.zeros((), dtype=dif.dtype))
    dec_parts = {"cls": 0.0, "bce": 0.0, "dice": 0.0}
    for stage in result.decoder_stages:
        term, p = loss_mask_cls(stage.mask_logits, stage.class_logits, gt_masks,
                                categories, grounded)
        dec = dec + term
        for key in dec_parts:
            dec_parts[key] += p.get(key, 0.0)
    parts.update({f"dec_{k}": v for k, v in dec_parts.items()})

    total = dif + ada + dec
    report = LossReport(
        loss_dif=float(dif.data), loss_ada=float(ada.data), loss_dec=float(dec.data),
        total=float(total.data), parts=parts, warnings=warnings,
    )
    return total, report
