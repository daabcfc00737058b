#!/usr/bin/env python3
"""Routing-geometry analysis on a fine-tuned model: the key-vector atlas
projected into the backbone's PCA plane, routing statistics, and the
redundancy model for adapter capacity.

Reuses the checkpoint from 04_train_toy.py when present; otherwise trains a
quick stand-in first. Outputs land in demos_out/analysis.
"""

import os

import numpy as np

from perft_lab.analysis import (
    RedundancyModel,
    effective_count,
    extract_atlas,
    gamma_for_effective,
    project_atlas,
    redundancy_estimate,
    routing_stats,
    write_atlas_csv,
    write_atlas_svg,
    write_routing_csv,
)
from perft_lab.checkpoint import load_checkpoint
from perft_lab.data import ByteTokenizer, TaskSpec, encode_batch, generate_samples

HERE = os.path.dirname(__file__)
CKPT = os.path.join(HERE, "demos_out", "train_toy", "finetuned")
OUT = os.path.join(HERE, "demos_out", "analysis")
os.makedirs(OUT, exist_ok=True)

if not os.path.exists(os.path.join(CKPT, "manifest.json")):
    print("no fine-tuned checkpoint found; running 04_train_toy.py first\n")
    import runpy

    runpy.run_path(os.path.join(HERE, "04_train_toy.py"))
    print()

model = load_checkpoint(CKPT)
pcfg = model.perft_cfg
print(f"loaded fine-tuned model: PERFT-{pcfg.variant}, m={pcfg.m}, d_b={pcfg.d_b}")

# ------------------------------------------------------------------- atlas

for layer in range(model.cfg.l):
    atlas = extract_atlas(model, layer)
    proj = project_atlas(atlas, dims=2)
    csv_path = os.path.join(OUT, f"atlas_layer{layer}.csv")
    svg_path = os.path.join(OUT, f"atlas_layer{layer}.svg")
    write_atlas_csv(proj, csv_path)
    write_atlas_svg(proj, svg_path)
    kinds = np.asarray(proj.kinds)
    spread = proj.coords[kinds == "ffn_key"].std(axis=0)
    adapter = proj.coords[kinds == "peft_key"]
    print(f"layer {layer}: {atlas.vectors.shape[0]} vectors, backbone key "
          f"spread ({spread[0]:.3f}, {spread[1]:.3f}), adapter keys at "
          f"radius {np.linalg.norm(adapter, axis=1).mean():.3f}")
print(f"wrote atlas csv/svg pairs under {OUT}")
print()

# ------------------------------------------------------------ routing view

samples = generate_samples(TaskSpec(kind="reverse", min_len=2, max_len=3,
                                    seed=201), 128)
batch = encode_batch(samples, ByteTokenizer(), model.cfg.t_max)
stats = routing_stats(model, batch["tokens"])
write_routing_csv(stats, os.path.join(OUT, "routing.csv"))
for st in stats:
    top = int(np.argmax(st.dispatch_fraction))
    print(f"layer {st.layer}: dispatch entropy {st.entropy:.3f} nats "
          f"(uniform would be {np.log(model.cfg.n_experts):.3f}), busiest "
          f"expert {top} takes {st.dispatch_fraction[top]:.2%}")
    if st.peft_dispatch_fraction is not None:
        print(f"          adapter dispatch: "
              + ", ".join(f"{f:.2%}" for f in st.peft_dispatch_fraction))
print()

# ------------------------------------------------------- redundancy model

keys = extract_atlas(model, 0).subset("peft_key")
cap = pcfg.m * pcfg.d_b
print(f"adapter keys in layer 0: {cap} columns")
for eps in (0.05, 0.15, 0.25, 0.40):
    print(f"  merge radius eps={eps:4.2f}: {effective_count(keys, eps):2d} "
          f"effectively distinct")
print()

# The capacity model lives on unit-sphere directions in the bottleneck, so
# its eps scale is coarser than the raw key geometry above. Near eps=1.5 the
# pairwise-collision probability p0 becomes tangible and the overlap-growth
# knob gamma_t sweeps the expected effective count across [0, cap].
eps = 1.5
print(f"capacity model at eps={eps} (m={pcfg.m}, d_b={pcfg.d_b}):")
for gamma in (0.5, 1.0, 4.0):
    est = redundancy_estimate(RedundancyModel(pcfg.m, pcfg.d_b, eps, gamma))
    print(f"  gamma_t={gamma:3.1f}: p0={est.p0:.4f}, eta={est.eta:.4f}, "
          f"expected effective {est.expected_effective:5.2f} of {cap}")
gamma_fit = gamma_for_effective(pcfg.m, pcfg.d_b, eps, 12.0)
est = redundancy_estimate(RedundancyModel(pcfg.m, pcfg.d_b, eps, gamma_fit))
print(f"  inverted: gamma_t={gamma_fit:.3f} would predict "
      f"{est.expected_effective:.1f} of {cap}")
