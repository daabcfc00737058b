"""Loss assembly, optimizer, and the training loop.

Total objective:

    total = ce + aux_coef * (lb_backbone + z_backbone + lb_peft)

where ce is answer-masked cross-entropy, lb is the load-balance loss and z
the router z-loss, each averaged over layers (so the uniform-routing anchors
hold for any depth), and lb_peft appears only when the attached variant has
its own router. Auxiliary terms run over every token position, padding
included. Their gradients enter the backward pass as per-layer injections on
routing probs and logits.

Metrics CSV column order (fixed): step, lr, loss_total, loss_ce, loss_lb,
loss_z, loss_lb_peft, grad_norm, eval_token_acc, eval_exact_match. The eval
columns are empty on steps without an evaluation.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import ByteTokenizer, Sample, encode_batch
from .model import LanguageModel
from .moe import (
    load_balance_loss,
    load_balance_loss_backward,
    z_loss,
    z_loss_backward,
)
from .numerics import ConfigError, InputError, NumericError, Parameter, Rng, softmax_rows

METRICS_COLUMNS = [
    "step", "lr", "loss_total", "loss_ce", "loss_lb", "loss_z",
    "loss_lb_peft", "grad_norm", "eval_token_acc", "eval_exact_match",
]


def cross_entropy(logits: np.ndarray, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over masked positions, plus d(loss)/d(logits).

    logits (B, T, V), targets (B, T) ints, mask (B, T) nonnegative weights
    (None means all ones). Loss = sum(mask * nll) / sum(mask).
    """
    if logits.ndim != 3:
        raise InputError(f"logits must be (B, T, V), got {logits.shape}")
    b, t, v = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (b, t):
        raise InputError(f"targets shape {targets.shape} does not match logits {(b, t)}")
    if targets.min() < 0 or targets.max() >= v:
        raise InputError(f"targets must lie in [0, {v})")
    if mask is None:
        mask = np.ones((b, t))
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total <= 0.0:
        raise InputError("cross entropy needs at least one unmasked position")
    flat = logits.reshape(b * t, v)
    probs = softmax_rows(flat)
    idx = np.arange(b * t)
    tgt = targets.reshape(-1)
    nll = -np.log(np.maximum(probs[idx, tgt], 1e-300))
    w = mask.reshape(-1)
    loss = float(np.sum(w * nll) / total)
    d_flat = probs * w[:, None]
    d_flat[idx, tgt] -= w
    d_flat /= total
    return loss, d_flat.reshape(b, t, v)


@dataclass
class LossBreakdown:
    ce: float
    lb_backbone: float
    z_backbone: float
    lb_peft: float
    total: float


def loss_and_grads(model: LanguageModel, batch: dict, aux_coef: float,
                   train: bool = False, rng: Optional[Rng] = None,
                   backward: bool = True) -> LossBreakdown:
    """Forward, assemble the total objective, and (optionally) backprop it.

    Gradients accumulate into trainable parameters; call model.zero_grad()
    first when a fresh gradient is wanted.
    """
    logits, cache = model.forward(batch["tokens"], train=train, rng=rng)
    ce, d_logits = cross_entropy(logits, batch["targets"], batch.get("mask"))
    n = model.cfg.n_experts
    n_layers = len(model.blocks)
    peft_z = bool(model.perft_cfg and model.perft_cfg.peft_z_loss)
    lb_terms, z_terms, lb_peft_terms = [], [], []
    extras: list[Optional[dict]] = []
    for info in cache.infos:
        lb_terms.append(load_balance_loss(info.backbone, n))
        z_terms.append(z_loss(info.backbone_logits))
        ex: dict = {}
        if aux_coef != 0.0 and backward:
            scale = aux_coef / n_layers
            ex["d_probs_extra"] = scale * load_balance_loss_backward(info.backbone, n)
            ex["d_logits_extra"] = scale * z_loss_backward(info.backbone_logits)
        if info.peft is not None:
            m = info.peft.probs.shape[1]
            lb_peft_terms.append(load_balance_loss(info.peft, m))
            if peft_z:
                lb_peft_terms[-1] += z_loss(info.peft_logits)
            if aux_coef != 0.0 and backward:
                scale = aux_coef / n_layers
                ex["d_peft_probs_extra"] = scale * load_balance_loss_backward(info.peft, m)
                if peft_z:
                    ex["d_peft_logits_extra"] = scale * z_loss_backward(info.peft_logits)
        extras.append(ex or None)
    lb = float(np.mean(lb_terms))
    z = float(np.mean(z_terms))
    lb_peft = float(np.mean(lb_peft_terms)) if lb_peft_terms else 0.0
    total = ce + aux_coef * (lb + z + lb_peft)
    if backward:
        model.backward(cache, d_logits, extras)
    return LossBreakdown(ce, lb, z, lb_peft, total)


class AdamW:
    """Adam with decoupled weight decay; acts only on trainable parameters."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.slots = [(p, np.zeros_like(p.value), np.zeros_like(p.value))
                      for p in params if p.trainable]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in self.slots:
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= lr * update


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale trainable grads so their global l2 norm is at most max_norm."""
    sq = 0.0
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        sq += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(sq)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for p in trainable:
            p.grad *= scale
    return norm


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup then linear decay: base * min((s+1)/warmup, (total-s)/(total-warmup)).

    step is 0-indexed. lr(warmup-1) = base; lr(0) = base/warmup; the last
    step (total-1) gets base/(total-warmup).
    """
    if total <= warmup:
        raise ConfigError(f"total steps {total} must exceed warmup {warmup}")
    if not (0 <= step < total):
        raise ConfigError(f"step {step} outside [0, {total})")
    return base_lr * min((step + 1) / warmup, (total - step) / (total - warmup))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 16
    epochs: int = 3
    max_steps: Optional[int] = None
    aux_coef: float = 0.01
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 200
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.max_steps is not None and self.max_steps <= self.warmup_steps:
            raise ConfigError(
                f"max_steps={self.max_steps} must exceed warmup_steps={self.warmup_steps}"
            )
        if not (0.0 <= self.aux_coef):
            raise ConfigError(f"aux_coef must be >= 0, got {self.aux_coef}")


def freeze_partition(model: LanguageModel) -> list[Parameter]:
    """Freeze the backbone, leave adapter-side parameters trainable.

    Returns the trainable list. Frozen parameters keep zero grad accumulators
    and are never touched by the optimizer, so their bytes are stable across
    any number of steps.
    """
    if model.perft_cfg is None:
        raise ConfigError("no variant attached; nothing to fine-tune")
    trainable = []
    for p in model.parameters():
        p.trainable = p.role == "peft"
        if p.trainable:
            trainable.append(p)
        else:
            p.grad[...] = 0.0
    if not trainable:
        raise ConfigError("freeze partition left no trainable parameters")
    return trainable


def evaluate(model: LanguageModel, samples: list[Sample], tok: ByteTokenizer,
             batch_size: int = 32) -> dict:
    """Teacher-forced answer accuracy: token level and whole-answer exact match."""
    correct = 0
    total = 0
    exact = 0
    ce_sum = 0.0
    ce_batches = 0
    for lo in range(0, len(samples), batch_size):
        batch = encode_batch(samples[lo : lo + batch_size], tok, model.cfg.t_max)
        logits, _ = model.forward(batch["tokens"], train=False)
        ce, _ = cross_entropy(logits, batch["targets"], batch["mask"])
        ce_sum += ce
        ce_batches += 1
        pred = logits.argmax(axis=2)
        hit = (pred == batch["targets"]) * batch["mask"]
        correct += int(hit.sum())
        total += int(batch["mask"].sum())
        per_sample = np.all((hit > 0) == (batch["mask"] > 0), axis=1)
        exact += int(per_sample.sum())
    return {
        "token_accuracy": correct / total if total else 0.0,
        "exact_match": exact / len(samples) if samples else 0.0,
        "ce": ce_sum / max(ce_batches, 1),
        "n_samples": len(samples),
    }


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    final_eval: Optional[dict] = None
    steps_run: int = 0
    diverged: bool = False


def train_loop(model: LanguageModel, train_samples: list[Sample], tok: ByteTokenizer,
               cfg: TrainConfig, eval_samples: Optional[list[Sample]] = None,
               out_dir: Optional[str] = None, log_every: int = 50) -> TrainResult:
    """Deterministic minibatch training. Same seed, same model, same samples:
    bit-identical metrics. On a non-finite loss the last good weights are
    checkpointed (when out_dir is set) and a NumericError is raised."""
    if not train_samples:
        raise InputError("train_loop needs a non-empty training set")
    rng = Rng(cfg.seed)
    batch_rng = rng.child(0)
    drop_rng = rng.child(1)
    n = len(train_samples)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch
    if total_steps <= cfg.warmup_steps:
        raise ConfigError(
            f"run of {total_steps} steps does not cover warmup={cfg.warmup_steps}"
        )
    trainable = [p for p in model.parameters() if p.trainable]
    if not trainable:
        raise ConfigError("no trainable parameters")
    opt = AdamW(trainable, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    order = batch_rng.permutation(n)
    cursor = 0
    result = TrainResult()
    writer = None
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
    try:
        for step in range(total_steps):
            if cursor + cfg.batch_size > n:
                order = batch_rng.permutation(n)
                cursor = 0
            idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = encode_batch([train_samples[i] for i in idx], tok, model.cfg.t_max)
            model.zero_grad()
            breakdown = loss_and_grads(model, batch, cfg.aux_coef, train=True, rng=drop_rng)
            if not math.isfinite(breakdown.total):
                if out_dir is not None:
                    from .checkpoint import save_checkpoint

                    save_checkpoint(os.path.join(out_dir, "last_good"), model)
                raise NumericError(
                    f"non-finite loss at step {step}: total={breakdown.total}, "
                    f"last good total="
                    f"{result.history[-1]['loss_total'] if result.history else 'n/a'}"
                )
            gnorm = clip_grad_norm(trainable, cfg.grad_clip)
            lr = lr_at(step, cfg.lr, cfg.warmup_steps, total_steps)
            opt.step(lr)
            row = {
                "step": step,
                "lr": lr,
                "loss_total": breakdown.total,
                "loss_ce": breakdown.ce,
                "loss_lb": breakdown.lb_backbone,
                "loss_z": breakdown.z_backbone,
                "loss_lb_peft": breakdown.lb_peft,
                "grad_norm": gnorm,
                "eval_token_acc": "",
                "eval_exact_match": "",
            }
            is_last = step == total_steps - 1
            if eval_samples and (step % cfg.eval_every == cfg.eval_every - 1 or is_last):
                ev = evaluate(model, eval_samples, tok)
                row["eval_token_acc"] = ev["token_accuracy"]
                row["eval_exact_match"] = ev["exact_match"]
                result.final_eval = ev
            if writer is not None and (step % log_every == 0 or row["eval_token_acc"] != "" or is_last):
                writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
            result.history.append(row)
            if (out_dir is not None and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == cfg.checkpoint_every - 1):
                from .checkpoint import save_checkpoint

                save_checkpoint(os.path.join(out_dir, "last_good"), model)
            result.steps_run = step + 1
    finally:
        if fh is not None:
            fh.close()
    return result


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"
