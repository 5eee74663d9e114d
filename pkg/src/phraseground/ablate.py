"""Ablation driver: trains config variants along one experimental axis under
an identical seed, corpus and step budget, evaluates each on the held-out
split and emits the comparison table (CSV + printed) plus overlaid recall
curves.

Axes mirror the result tables this pipeline is built around:
  eipa             2x2 grid over {adapter bypass, aggregation module}
  adapter_position No-Adapter / Encoder / Decoder / Encoder-Decoder
                   (aggregation reduced to deformable attention only)
  mlma             cumulative deformable / +bi-attention / +text self-attention
"""

from __future__ import annotations

import copy
import csv
import os

from . import metrics
from .config import RunConfig
from .evaluate import evaluate, format_ar_table
from .train import build_corpus, train

AXES = ("eipa", "mlma", "adapter_position")


def variant_configs(base: RunConfig, axis: str) -> dict:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    variants = {}

    def mk(label, adapter_position=None, mlma_enabled=None, bi=None, text=None,
           decoder_layers=None):
        cfg = copy.deepcopy(base)
        m = cfg.model
        if adapter_position is not None:
            m.adapter.position = adapter_position
        if mlma_enabled is not None:
            m.mlma.enabled = mlma_enabled
        if bi is not None:
            m.mlma.bi_attention = bi
        if text is not None:
            m.mlma.text_self_attention = text
        if decoder_layers is not None:
            m.decoder.layers = decoder_layers
        cfg.validate()
        variants[label] = cfg

    if axis == "eipa":
        # 2x2: the bypass and the aggregation+decoder stack, independently
        mk("static", adapter_position="none", mlma_enabled=False, decoder_layers=0)
        mk("eipa_only", adapter_position="both", mlma_enabled=False, decoder_layers=0)
        mk("mlma_only", adapter_position="none", mlma_enabled=True)
        mk("eipa_mlma", adapter_position="both", mlma_enabled=True)
    elif axis == "adapter_position":
        # aggregation reduced to deformable-only, decoder kept
        for label, pos in (("No-Adapter", "none"), ("Encoder", "encoder"),
                           ("Decoder", "decoder"), ("Encoder-Decoder", "both")):
            mk(label, adapter_position=pos, mlma_enabled=True, bi=False, text=False)
    else:  # mlma
        mk("deform", adapter_position="both", mlma_enabled=True, bi=False, text=False)
        mk("deform+bi", adapter_position="both", mlma_enabled=True, bi=True, text=False)
        mk("deform+bi+text", adapter_position="both", mlma_enabled=True, bi=True, text=True)
    return variants


def run_ablation(base: RunConfig, axis: str, out_dir: str, log_stream=None) -> dict:
    """Returns {label: {"ar": summary dict, "curves": curves}} and writes
    ablation_<axis>.csv plus a combined recall-curve figure."""
    os.makedirs(out_dir, exist_ok=True)
    train_corpus, held_out = build_corpus(base)
    digests = set()
    results = {}
    table_rows = {}
    for label, cfg in variant_configs(base, axis).items():
        if log_stream:
            log_stream(f"[{axis}] training variant {label!r} "
                       f"({cfg.optim.steps} steps, seed {cfg.optim.seed})")
        run = train(cfg, os.path.join(out_dir, label), corpus=train_corpus,
                    log_stream=log_stream)
        digests.add(run["corpus_digest"])
        _, curves = evaluate(run["model"], held_out, head=cfg.eval.head,
                             out_dir=os.path.join(out_dir, label), label=label)
        results[label] = {
            "curves": curves,
            "ar": {s: (None if isinstance(c, metrics.EmptySubset) else c.average_recall)
                   for s, c in curves.items()},
        }
        table_rows[label] = curves
    if len(digests) != 1:
        raise RuntimeError("ablation fairness violated: variants saw different corpora")

    csv_path = os.path.join(out_dir, f"ablation_{axis}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + list(metrics.SUBSETS))
        for label, res in results.items():
            writer.writerow([label] + [("" if res["ar"][s] is None else f"{res['ar'][s]:.4f}")
                                       for s in metrics.SUBSETS])
    metrics.plot_recall_curves(
        {label: res["curves"] for label, res in results.items()},
        os.path.join(out_dir, f"ablation_{axis}_recall.png"))
    if log_stream:
        log_stream("\n" + format_ar_table(table_rows))
        log_stream(f"table written to {csv_path}")
    return results
