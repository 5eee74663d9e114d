"""Average Recall evaluation: per-phrase IoU, recall-vs-threshold curves on a
fixed 100-point grid, subset breakdowns (things/stuff, singulars/plurals),
CSV emission and rendered recall-curve figures.

Plural phrases arrive with their instance masks already unioned, both on the
ground-truth side (by the generator) and on the prediction side (one mask per
phrase), so every record is a single mask pair.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import ContractViolation

THRESHOLDS = np.round(np.arange(1, 101) * 0.01, 2)
SUBSETS = ("overall", "things", "stuff", "singulars", "plurals")


@dataclass
class EvalRecord:
    phrase_id: str
    iou: float
    is_thing: bool
    is_plural: bool


@dataclass
class RecallCurve:
    thresholds: np.ndarray
    recalls: np.ndarray
    average_recall: float


class EmptySubset:
    """Explicit marker: the subset had no records (distinct from AR = 0)."""

    def __repr__(self):
        return "EmptySubset()"


EMPTY_SUBSET = EmptySubset()


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractViolation(f"iou shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0  # vacuous agreement; evaluation excludes empty-GT phrases upstream
    return float(np.logical_and(pred, gt).sum() / union)


def merge_plural(masks) -> np.ndarray:
    masks = list(masks)
    if not masks:
        raise ContractViolation("merge_plural needs at least one mask")
    out = np.asarray(masks[0], dtype=bool)
    for m in masks[1:]:
        m = np.asarray(m, dtype=bool)
        if m.shape != out.shape:
            raise ContractViolation("merge_plural shape mismatch")
        out = np.logical_or(out, m)
    return out.astype(np.uint8)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(probs) >= threshold


def average_recall(records: list, subset: str = "overall"):
    """Recall at each grid threshold (iou >= t) and its mean. Returns the
    EMPTY_SUBSET marker when no record survives the filter."""
    filtered = [r for r in records if _in_subset(r, subset)]
    if not filtered:
        return EMPTY_SUBSET
    ious = np.asarray([r.iou for r in filtered])
    hits = (ious[None, :] >= THRESHOLDS[:, None]).sum(axis=1)
    n = len(filtered)
    # one exact integer ratio, so a brute-force double loop agrees bit-for-bit
    return RecallCurve(THRESHOLDS.copy(), hits / n, float(int(hits.sum()) / (len(THRESHOLDS) * n)))


def _in_subset(record: EvalRecord, subset: str) -> bool:
    if subset == "overall":
        return True
    if subset == "things":
        return record.is_thing
    if subset == "stuff":
        return not record.is_thing
    if subset == "singulars":
        return not record.is_plural
    if subset == "plurals":
        return record.is_plural
    raise ContractViolation(f"unknown subset {subset!r}")


def assert_partitions(records: list):
    """things + stuff and singulars + plurals must partition the record set."""
    n = len(records)
    n_things = sum(r.is_thing for r in records)
    n_stuff = sum(not r.is_thing for r in records)
    n_sing = sum(not r.is_plural for r in records)
    n_plur = sum(r.is_plural for r in records)
    if n_things + n_stuff != n or n_sing + n_plur != n:
        raise ContractViolation("subset partitions do not cover the record set")


def evaluate_records(records: list) -> dict:
    assert_partitions(records)
    return {subset: average_recall(records, subset) for subset in SUBSETS}


# ---------------------------------------------------------------------------
# reporting


def write_metrics_csv(curves: dict, path: str):
    """One row per (subset, threshold, recall) plus a summary AR row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "threshold", "recall"])
        for subset, curve in curves.items():
            if isinstance(curve, EmptySubset):
                writer.writerow([subset, "average", "empty"])
                continue
            for t, r in zip(curve.thresholds, curve.recalls):
                writer.writerow([subset, f"{t:.2f}", f"{r:.6f}"])
            writer.writerow([subset, "average", f"{curve.average_recall:.6f}"])


def write_recall_curve_csv(curves: dict, path: str):
    """Wide layout mirroring the recall-curve figure axes: IoU column plus one
    recall column per subset."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["IoU"] + list(SUBSETS))
        for i, t in enumerate(THRESHOLDS):
            row = [f"{t:.2f}"]
            for subset in SUBSETS:
                curve = curves.get(subset)
                row.append("" if isinstance(curve, EmptySubset) else f"{curve.recalls[i]:.6f}")
            writer.writerow(row)


def plot_recall_curves(curve_sets: dict, path: str, subset: str = "overall"):
    """Render recall-vs-IoU curves for one subset; curve_sets maps a label to
    an evaluate_records() result."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for label, curves in curve_sets.items():
        curve = curves.get(subset)
        if isinstance(curve, EmptySubset):
            continue
        ax.plot(curve.thresholds, curve.recalls, label=f"{label} (AR={curve.average_recall:.3f})")
    ax.set_xlabel("IoU")
    ax.set_ylabel("Recall@IoU")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    ax.set_title(f"Recall curve ({subset})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
