"""Command line interface.

Verbs: generate-data, train, eval, gradcheck, ablate, visualize. Output goes
to --out (default ./runs/<verb>), overridable globally with the
PHRASEGROUND_OUT environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .ablate import AXES, run_ablation
from .config import RunConfig, apply_overrides, load_config, micro_config, save_config
from .data import SceneSpec, generate_corpus, load_annotations, save_annotations
from .evaluate import evaluate, format_ar_table, summarize
from .microcheck import GRADCHECK_TOLERANCE, run_micro_gradcheck
from .model import GroundingModel
from .train import build_corpus, load_checkpoint, train
from .visualize import visualize_sample


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    cfg.validate()
    return cfg


def _out_dir(args, verb: str) -> str:
    base = os.environ.get("PHRASEGROUND_OUT")
    if args.out:
        path = args.out
    elif base:
        path = os.path.join(base, verb)
    else:
        path = os.path.join("runs", verb)
    os.makedirs(path, exist_ok=True)
    return path


def _add_common(p):
    p.add_argument("--config", help="YAML/JSON run config")
    p.add_argument("--set", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--out", help="output directory")


def cmd_generate_data(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "data")
    scene = SceneSpec(
        num_things=cfg.data.scene.num_things,
        num_stuff=cfg.data.scene.num_stuff,
        plural_probability=cfg.data.scene.plural_probability,
        distractor_phrase_probability=cfg.data.scene.distractor_phrase_probability,
        image_size=cfg.model.image_size,
    )
    for split, count, seed in (("train", cfg.data.train_size, cfg.data.seed),
                               ("eval", cfg.data.eval_size, cfg.data.seed + cfg.data.train_size)):
        samples = generate_corpus(scene, count, base_seed=seed)
        path = os.path.join(out, f"{split}.json")
        save_annotations(samples, path)
        print(f"wrote {count} samples to {path}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "train")
    save_config(cfg, os.path.join(out, "config.yaml"))
    run = train(cfg, out, log_stream=print)
    model = run["model"]
    print("parameter summary:", model.summary())
    print(f"checkpoint: {run['checkpoint']}")
    _, held_out = build_corpus(cfg)
    _, curves = evaluate(model, held_out, head=cfg.eval.head, out_dir=out, label="heldout")
    print(format_ar_table({"held-out": curves}))
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "eval")
    model = GroundingModel(cfg.model)
    if args.checkpoint:
        load_checkpoint(model, cfg, args.checkpoint)
    if args.data:
        samples = load_annotations(args.data)
    else:
        _, samples = build_corpus(cfg)
    _, curves = evaluate(model, samples, head=cfg.eval.head, out_dir=out, label="eval")
    print(format_ar_table({cfg.eval.head: curves}))
    print("AR:", summarize(curves))
    return 0


def cmd_gradcheck(args):
    cfg = micro_config()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    rep = run_micro_gradcheck(cfg, sample_seed=args.sample_seed,
                              max_entries_per_param=args.max_entries)
    tol = args.tolerance
    n_bad = 0
    for line in rep.summary_lines(tol):
        print(line)
        n_bad += "FAIL" in line
    print(f"max relative error: {rep.max_rel_err:.3e} (tolerance {tol:g}, "
          f"epsilon {rep.epsilon:g})")
    print("gradcheck:", "PASS" if rep.ok(tol) else f"FAIL ({n_bad} parameters)")
    return 0 if rep.ok(tol) else 1


def cmd_ablate(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, f"ablate_{args.axis}")
    run_ablation(cfg, args.axis, out, log_stream=print)
    return 0


def cmd_visualize(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "visualize")
    model = GroundingModel(cfg.model)
    if args.checkpoint:
        load_checkpoint(model, cfg, args.checkpoint)
    if args.data:
        samples = load_annotations(args.data)
    else:
        _, samples = build_corpus(cfg)
    picks = [int(i) for i in args.samples.split(",")] if args.samples else [0]
    for i in picks:
        files = visualize_sample(model, samples[i], out, tag=f"sample{i}", head=cfg.eval.head)
        for f in files:
            print("wrote", f)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="phraseground",
                                     description="desk-scale panoptic narrative grounding")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate-data", help="write annotation containers for both splits")
    _add_common(p)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train from a config, evaluate held-out")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or fresh init)")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint .npz")
    p.add_argument("--data", help="annotation container to evaluate on")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full micro model")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=None,
                   help="subsample entries per parameter (default exhaustive)")
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare variants along one axis")
    _add_common(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("visualize", help="attention panels and mask overlays")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint .npz")
    p.add_argument("--data", help="annotation container to draw samples from")
    p.add_argument("--samples", help="comma-separated sample indices (default 0)")
    p.set_defaults(fn=cmd_visualize)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
