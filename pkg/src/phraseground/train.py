"""Training loop: AdamW over the unfrozen parameters, per-step loss logging,
NaN abort with a last-good checkpoint, and a checkpoint container (npz) that
refuses to load into a model built from a different configuration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np

from .config import RunConfig
from .data import SceneSpec, generate_corpus
from .losses import total_loss
from .model import GroundingModel, ground_truth
from .tensor import ContractViolation


class NonFiniteLossAbort(RuntimeError):
    def __init__(self, step, tensor_name, checkpoint_path):
        super().__init__(
            f"non-finite loss at step {step}; first non-finite tensor: {tensor_name}; "
            f"last good checkpoint: {checkpoint_path}")
        self.tensor_name = tensor_name


class AdamW:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            update = (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - (self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        self.m = [np.asarray(a) for a in state["m"]]
        self.v = [np.asarray(a) for a in state["v"]]


def parameter_hash(model: GroundingModel, frozen_only: bool = False) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if frozen_only and not p.frozen:
            continue
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def corpus_digest(samples) -> str:
    digest = hashlib.sha256()
    for s in samples:
        digest.update(np.ascontiguousarray(s.image).tobytes())
        digest.update(" ".join(s.caption).encode())
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GroundingModel, optimizer: AdamW | None, cfg: RunConfig,
                    step: int, path: str):
    state = model.state_dict()
    arrays = {f"param/{k}": v for k, v in state.items()}
    if optimizer is not None:
        opt = optimizer.state_dict()
        for i, (m, v) in enumerate(zip(opt["m"], opt["v"])):
            arrays[f"opt_m/{i}"] = m
            arrays[f"opt_v/{i}"] = v
        arrays["opt_step"] = np.asarray(opt["step"])
    meta = {"fingerprint": cfg.fingerprint(), "step": step, "n_opt": len(optimizer.params) if optimizer else 0}
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(model: GroundingModel, cfg: RunConfig, path: str,
                    optimizer: AdamW | None = None) -> int:
    blob = np.load(path)
    meta = json.loads(bytes(blob["meta_json"]).decode())
    if meta["fingerprint"] != cfg.fingerprint():
        raise ContractViolation(
            f"checkpoint fingerprint {meta['fingerprint']} does not match config {cfg.fingerprint()}")
    state = {k[len("param/"):]: blob[k] for k in blob.files if k.startswith("param/")}
    model.load_state_dict(state)
    if optimizer is not None and meta.get("n_opt"):
        n = meta["n_opt"]
        opt_state = {
            "step": blob["opt_step"],
            "m": [blob[f"opt_m/{i}"] for i in range(n)],
            "v": [blob[f"opt_v/{i}"] for i in range(n)],
        }
        optimizer.load_state_dict(opt_state)
    return int(meta["step"])


def build_corpus(cfg: RunConfig):
    scene = SceneSpec(
        num_things=cfg.data.scene.num_things,
        num_stuff=cfg.data.scene.num_stuff,
        plural_probability=cfg.data.scene.plural_probability,
        distractor_phrase_probability=cfg.data.scene.distractor_phrase_probability,
        image_size=cfg.model.image_size,
    )
    train = generate_corpus(scene, cfg.data.train_size, base_seed=cfg.data.seed)
    held_out = generate_corpus(scene, cfg.data.eval_size, base_seed=cfg.data.seed + cfg.data.train_size)
    return train, held_out


def _first_non_finite(result) -> str:
    probes = [("masks_dif", result.masks_dif)]
    if result.masks_ada is not None:
        probes.append(("masks_ada", result.masks_ada))
    probes.append(("masks_dec", result.masks_dec))
    probes.append(("class_logits", result.class_logits))
    for b in result.block_outputs:
        probes.append((f"block{b.index}.feature", b.feature))
    for name, tensor in probes:
        if not np.isfinite(tensor.data).all():
            return name
    return "loss"


def train(cfg: RunConfig, out_dir: str, corpus=None, log_stream=None,
          eval_hook=None) -> dict:
    """Run the configured training; returns a dict with the model, the final
    checkpoint path and the loss history. ``eval_hook(model, step)`` may
    return True to stop early."""
    os.makedirs(out_dir, exist_ok=True)
    model = GroundingModel(cfg.model)
    if corpus is None:
        corpus, _ = build_corpus(cfg)
    optimizer = AdamW(model.parameters(), lr=cfg.optim.lr, beta1=cfg.optim.beta1,
                      beta2=cfg.optim.beta2, eps=cfg.optim.eps,
                      weight_decay=cfg.optim.weight_decay)
    rng = np.random.default_rng(np.random.PCG64(cfg.optim.seed))
    history = []
    ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    last_good = os.path.join(out_dir, "last_good.npz")
    log_path = os.path.join(out_dir, "train_log.csv")
    save_checkpoint(model, optimizer, cfg, 0, ckpt_path)
    log_fh = open(log_path, "w", newline="")
    writer = None
    stopped_early = False
    try:
        for step in range(1, cfg.optim.steps + 1):
            idxs = rng.integers(0, len(corpus), size=cfg.optim.batch_size)
            optimizer.zero_grad()
            batch_report = None
            for idx in idxs:
                sample = corpus[int(idx)]
                result = model.forward(sample)
                gt_masks, cats, grounded = ground_truth(sample)
                loss, report = total_loss(result, gt_masks, cats, grounded)
                if not np.isfinite(loss.data):
                    save_checkpoint(model, optimizer, cfg, step - 1, last_good)
                    raise NonFiniteLossAbort(step, _first_non_finite(result), last_good)
                (loss * (1.0 / cfg.optim.batch_size)).backward()
                batch_report = report if batch_report is None else _merge(batch_report, report)
            optimizer.step()
            row = {k: v / cfg.optim.batch_size for k, v in batch_report.as_row().items()}
            row["step"] = step
            history.append(row)
            if writer is None:
                writer = csv.DictWriter(log_fh, fieldnames=list(row))
                writer.writeheader()
            writer.writerow(row)
            if log_stream is not None and step % cfg.optim.log_every == 0:
                log_stream(f"step {step:5d}  total {row['total']:.4f}  "
                           f"dif {row['loss_dif']:.4f}  ada {row['loss_ada']:.4f}  "
                           f"dec {row['loss_dec']:.4f}")
            if step % cfg.optim.checkpoint_every == 0 or step == cfg.optim.steps:
                save_checkpoint(model, optimizer, cfg, step, ckpt_path)
            if eval_hook is not None and eval_hook(model, step):
                save_checkpoint(model, optimizer, cfg, step, ckpt_path)
                stopped_early = True
                break
    finally:
        log_fh.close()
    return {"model": model, "checkpoint": ckpt_path, "history": history,
            "corpus_digest": corpus_digest(corpus), "stopped_early": stopped_early}


def _merge(a, b):
    from .losses import LossReport

    parts = {k: a.parts.get(k, 0.0) + b.parts.get(k, 0.0) for k in set(a.parts) | set(b.parts)}
    return LossReport(a.loss_dif + b.loss_dif, a.loss_ada + b.loss_ada,
                      a.loss_dec + b.loss_dec, a.total + b.total, parts,
                      a.warnings + b.warnings)
