"""The micro gradient-check fixture: a 16x16 two-phrase scene driven through
the full model in double precision, with exhaustive central finite
differences over every trainable parameter.

The fixture runs with the thresholded attention-mask scheduling disabled:
those masks are step functions of the parameters (no finite difference can
cross them meaningfully) and carry no gradient by construction; the masked
softmax itself has dedicated exactness tests.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig, micro_config
from .data import GroundingSample, PhraseAnnotation
from .gradcheck import GradCheckReport, finite_difference_check
from .losses import total_loss
from .model import GroundingModel, ground_truth

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_EPSILON = 1e-3


def micro_sample(seed: int = 0, size: int = 16) -> GroundingSample:
    """Two grounded phrases (a thing and a stuff band) on a noise canvas."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    img = rng.random((size, size, 3)).astype(np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    circle = (((yy - 10) ** 2 + (xx - 8) ** 2) <= 16).astype(np.uint8)
    band = np.zeros((size, size), np.uint8)
    band[0:5] = 1
    band[circle == 1] = 0
    caption = "a red circle and a pale sky".split()
    phrases = [
        PhraseAnnotation((0, 3), 0, True, False, True, circle),
        PhraseAnnotation((4, 7), 6, False, False, True, band),
    ]
    return GroundingSample(img, caption, phrases)


def build_micro_model(cfg: RunConfig | None = None) -> GroundingModel:
    cfg = cfg or micro_config()
    return GroundingModel(cfg.model)


def run_micro_gradcheck(cfg: RunConfig | None = None, sample_seed: int = 0,
                        max_entries_per_param: int | None = None,
                        params=None) -> GradCheckReport:
    """Finite-difference check of total_loss over the micro model. Exhaustive
    by default; pass max_entries_per_param for a quick subsampled pass."""
    cfg = cfg or micro_config()
    model = build_micro_model(cfg)
    sample = micro_sample(sample_seed)
    gt_masks, cats, grounded = ground_truth(sample)

    def f():
        result = model.forward(sample)
        loss, _ = total_loss(result, gt_masks, cats, grounded)
        return loss

    if params is None:
        params = [p for _, p in model.named_parameters()]
    return finite_difference_check(f, params, epsilon=GRADCHECK_EPSILON,
                                   max_entries_per_param=max_entries_per_param)
