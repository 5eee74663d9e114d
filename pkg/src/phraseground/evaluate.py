"""Evaluation: run a head over a corpus, binarize at 0.5, score IoU per
grounded phrase and emit Average Recall tables, CSVs and the recall-curve
figure.
"""

from __future__ import annotations

import os

import numpy as np

from . import metrics
from .model import GroundingModel


def collect_records(model: GroundingModel, samples, head: str = "decoder"):
    records = []
    for si, sample in enumerate(samples):
        probs = model.predict_probs(sample, head=head)
        preds = metrics.binarize(probs)
        for pi, ph in enumerate(sample.phrases):
            if not ph.grounded:
                continue
            records.append(metrics.EvalRecord(
                phrase_id=f"s{si}_p{pi}",
                iou=metrics.iou(preds[pi], ph.mask.astype(bool)),
                is_thing=ph.is_thing,
                is_plural=ph.is_plural,
            ))
    return records


def evaluate(model: GroundingModel, samples, head: str = "decoder", out_dir: str | None = None,
             label: str = "eval"):
    """Returns (records, curves dict); optionally writes metrics.csv,
    recall_curve.csv and recall_curve.png under out_dir."""
    records = collect_records(model, samples, head=head)
    curves = metrics.evaluate_records(records)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics.write_metrics_csv(curves, os.path.join(out_dir, f"{label}_metrics.csv"))
        metrics.write_recall_curve_csv(curves, os.path.join(out_dir, f"{label}_recall_curve.csv"))
        metrics.plot_recall_curves({label: curves}, os.path.join(out_dir, f"{label}_recall_curve.png"))
    return records, curves


def summarize(curves: dict) -> dict:
    out = {}
    for subset, curve in curves.items():
        out[subset] = None if isinstance(curve, metrics.EmptySubset) else curve.average_recall
    return out


def format_ar_table(rows: dict) -> str:
    """rows: label -> curves dict; renders the AR table layout used in the
    result tables (overall/things/stuff/singulars/plurals columns)."""
    header = f"{'variant':24s} " + " ".join(f"{s:>10s}" for s in metrics.SUBSETS)
    lines = [header, "-" * len(header)]
    for label, curves in rows.items():
        cells = []
        for subset in metrics.SUBSETS:
            curve = curves.get(subset)
            cells.append("     empty" if isinstance(curve, metrics.EmptySubset)
                         else f"{curve.average_recall:10.4f}")
        lines.append(f"{label:24s} " + " ".join(cells))
    return "\n".join(lines)
