#!/usr/bin/env python3
"""A complete desk-scale experiment in one sitting: pretrain a small MoE
transformer on markov text, then fine-tune adapters on the reverse task with
the backbone frozen, and verify the backbone bytes never moved.

Runs in a couple of minutes on one core. Outputs land in demos_out/train_toy.
"""

import os

import numpy as np

from perft_lab.checkpoint import backbone_checksum, load_checkpoint, save_checkpoint
from perft_lab.data import ByteTokenizer, TaskSpec, generate_samples
from perft_lab.model import ModelConfig, attach_variant, build_model
from perft_lab.numerics import Rng
from perft_lab.peft import PerftConfig
from perft_lab.training import TrainConfig, evaluate, freeze_partition, train_loop

OUT = os.path.join(os.path.dirname(__file__), "demos_out", "train_toy")
os.makedirs(OUT, exist_ok=True)
tok = ByteTokenizer()

model_cfg = ModelConfig(d=48, l=3, n_heads=6, d_a=64, n_experts=4, k=2,
                        vocab=260, t_max=24, dropout=0.05)

# ------------------------------------------------------------- pretraining

markov = TaskSpec(kind="markov_text", min_len=10, max_len=16, order=2,
                  alphabet_size=26, seed=100)
pre = generate_samples(markov, 2048 + 128)
pre_train, pre_eval = pre[:2048], pre[2048:]

model = build_model(model_cfg, seed=0)
cfg = TrainConfig(lr=1e-3, warmup_steps=50, batch_size=16, max_steps=1500,
                  aux_coef=0.01, seed=0, eval_every=500)
res = train_loop(model, pre_train, tok, cfg, eval_samples=pre_eval,
                 out_dir=os.path.join(OUT, "pretrain"))
ckpt = os.path.join(OUT, "backbone")
save_checkpoint(ckpt, model)
print(f"pretrain: {res.steps_run} steps, "
      f"ce {res.history[0]['loss_ce']:.3f} -> {res.history[-1]['loss_ce']:.3f}, "
      f"held-out ce {res.final_eval['ce']:.3f}")

# ------------------------------------------------------------- fine-tuning

reverse = TaskSpec(kind="reverse", min_len=2, max_len=2, seed=200)
rev_train = generate_samples(reverse, 2048)
rev_eval = generate_samples(TaskSpec(kind="reverse", min_len=2, max_len=2,
                                     seed=201), 128)

base = load_checkpoint(ckpt)
base_acc = evaluate(base, rev_eval, tok)["token_accuracy"]
print(f"frozen base on reverse: {base_acc:.3f} token accuracy")

ft = load_checkpoint(ckpt)
checksum_before = backbone_checksum(ft)
pcfg = attach_variant(ft, PerftConfig("R", d_b=8, m=2, k_peft=2, alpha=32),
                      Rng(1).child(7))
trainable = freeze_partition(ft)
print(f"attached PERFT-{pcfg.variant}: "
      f"{sum(p.value.size for p in trainable)} trainable adapter params")

cfg = TrainConfig(lr=3e-3, warmup_steps=50, batch_size=16, max_steps=1500,
                  aux_coef=0.01, seed=1, eval_every=500)
res = train_loop(ft, rev_train, tok, cfg, eval_samples=rev_eval,
                 out_dir=os.path.join(OUT, "finetune"))
acc = res.final_eval["token_accuracy"]
print(f"finetune: {res.steps_run} steps, reverse accuracy "
      f"{base_acc:.3f} -> {acc:.3f} "
      f"(exact match {res.final_eval['exact_match']:.3f})")

same = backbone_checksum(ft) == checksum_before
print(f"backbone bytes unchanged through fine-tuning: {same}")
save_checkpoint(os.path.join(OUT, "finetuned"), ft)

# A taste of the learned behavior on a few held-out strings.
from perft_lab.data import encode_batch
batch = encode_batch(rev_eval[:5], tok, model_cfg.t_max)
logits, _ = ft.forward(batch["tokens"])
pred = logits.argmax(axis=2)
for i, s in enumerate(rev_eval[:5]):
    picked = pred[i][batch["mask"][i] > 0]
    print(f"  {s.instruction!r} -> model says {tok.decode(picked)!r}, "
          f"truth {s.answer!r}")
