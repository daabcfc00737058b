#!/usr/bin/env python3
"""The four adapter wirings plus the two MoE-agnostic baselines, with exact
trainable-parameter accounting on the reference 1B-activated geometry.

Also demonstrates the two structural facts the test suite pins down:
fresh adapters are exact no-ops (zero-initialized up-projections), and the
embedded wiring equals the routed wiring when the routed variant shares the
backbone's router.
"""

import numpy as np

from perft_lab.model import ModelConfig, attach_variant, build_model, lm_forward
from perft_lab.numerics import Rng
from perft_lab.peft import OLMOE_1B_7B, PerftConfig, count_activated

# ---------------------------------------------------------------- accounting

ROWS = [
    ("qv-LoRA on attention", PerftConfig("qv_lora", d_b=4)),
    ("LoRA on the router", PerftConfig("gate_lora", d_b=4)),
    ("PERFT-S (single shared)", PerftConfig("S", d_b=4)),
    ("PERFT-D (2 always-on)", PerftConfig("D", d_b=4, m=2)),
    ("PERFT-E (per-expert)", PerftConfig("E", d_b=4)),
    ("PERFT-R Top1/4 d_b=32", PerftConfig("R", d_b=32, m=4, k_peft=1)),
]

print(f"reference geometry: d={OLMOE_1B_7B.d}, {OLMOE_1B_7B.l} layers, "
      f"{OLMOE_1B_7B.n} experts (top-{OLMOE_1B_7B.k}), "
      f"{OLMOE_1B_7B.activated_total_model / 1e9:.2f}B activated")
print()
print(f"{'variant':26} {'activated':>12} {'total':>12} {'% of backbone':>14}")
for label, pcfg in ROWS:
    acct = count_activated(pcfg, OLMOE_1B_7B)
    print(f"{label:26} {acct.activated_trainable:12,} {acct.total_trainable:12,} "
          f"{acct.ratio_percent:13.3f}%")
print()

# -------------------------------------------------- transparency at attach

cfg = ModelConfig(d=32, l=2, n_heads=4, d_a=24, n_experts=8, k=2,
                  vocab=64, t_max=16, dropout=0.0)
tokens = np.asarray(Rng(5).integers(0, 64, size=(2, 10)))

base = build_model(cfg, seed=1)
before = lm_forward(base, tokens)
for variant in (PerftConfig("R", d_b=4, m=2, k_peft=2),
                PerftConfig("E", d_b=4),
                PerftConfig("D", d_b=4, m=2),
                PerftConfig("S", d_b=4)):
    model = build_model(cfg, seed=1)
    attach_variant(model, variant, Rng(2))
    after = lm_forward(model, tokens)
    same = np.array_equal(before, after)
    n_peft = sum(p.value.size for p in model.parameters() if p.role == "peft")
    print(f"attach {variant.variant}: {n_peft:6d} adapter params, "
          f"logits bit-identical to base: {same}")
print()

# ------------------------------------- embedded as a special case of routed

from perft_lab.moe import FfnExpert, MoeLayer, Router
from perft_lab.numerics import Parameter
from perft_lab.peft import AdaptedMoe, make_peft_expert

D, D_A, N, K = 16, 12, 4, 2
rng = Rng(7)
router = Router(Parameter("w_g", rng.child(0).normal((D, N), 0.5)), k=K)
experts = [
    FfnExpert(Parameter(f"e{i}.up", rng.child(1, i).normal((D, D_A), 0.2)),
              Parameter(f"e{i}.down", rng.child(2, i).normal((D_A, D), 0.2)),
              "silu")
    for i in range(N)
]
moe = MoeLayer(router, experts)
pcfg = PerftConfig("E", d_b=3).resolved(N)
adapters = [make_peft_expert(f"a{i}", D, pcfg, rng.child(3, i)) for i in range(N)]
for i, ad in enumerate(adapters):
    ad.w_up.value[...] = rng.child(4, i).normal(ad.w_up.value.shape, 0.2)

h = rng.child(5).normal((64, D))
emb = AdaptedMoe(moe, "E", adapters=list(adapters))

# Routed wiring with m = N adapters driven by the backbone's own router (the
# router already carries k = K, so the adapter mixture reuses its gates).
routed = AdaptedMoe(moe, "R", adapters=list(adapters), peft_router=router)

y_e, _, _ = emb.forward(h)
y_r, _, _ = routed.forward(h)
print(f"embedded vs routed-with-shared-router, max |diff|: "
      f"{np.abs(y_e - y_r).max():.3e}")
