#!/usr/bin/env python3
"""Routing walk-through: softmax-over-all gating, top-k masks, aux losses.

Builds a single mixture layer, pushes a batch of token vectors through it,
and prints what the router decided: per-expert dispatch counts, gate mass,
and the two auxiliary losses with their uniform-routing anchor values.
"""

import numpy as np

from perft_lab.moe import FfnExpert, MoeLayer, Router, load_balance_loss, z_loss
from perft_lab.numerics import Parameter, Rng

D, D_A, N, K, T = 32, 64, 8, 2, 512

rng = Rng(0)
router = Router(Parameter("router.w_g", rng.child(0).normal((D, N), 0.5)), k=K)
experts = [
    FfnExpert(
        Parameter(f"experts.{i}.w_up", rng.child(1, i).normal((D, D_A), 0.1)),
        Parameter(f"experts.{i}.w_down", rng.child(2, i).normal((D_A, D), 0.1)),
        activation="silu",
    )
    for i in range(N)
]
moe = MoeLayer(router, experts)

h = rng.child(3).normal((T, D))
y, route, _ = moe.forward(h)

print(f"mixture: {N} experts, top-{K}, {T} tokens, d={D}")
print(f"output shape {y.shape}, finite: {bool(np.all(np.isfinite(y)))}")
print()

# The router softmaxes over all N experts first, then keeps the top k gates
# without renormalizing, so the kept mass is a diagnostic of routing
# confidence rather than being forced to 1.
kept_mass = route.gates.sum(axis=1)
print(f"softmax probs sum to 1:      {route.probs.sum(axis=1).mean():.6f}")
print(f"kept top-{K} mass, mean:       {kept_mass.mean():.4f}")
print(f"kept top-{K} mass, min/max:    {kept_mass.min():.4f} / {kept_mass.max():.4f}")
print()

counts = np.bincount(route.topk_idx.reshape(-1), minlength=N)
print("expert  dispatched  fraction  mean prob")
for i in range(N):
    print(f"  {i}       {counts[i]:5d}     {counts[i] / (T * K):.4f}    "
          f"{route.probs[:, i].mean():.4f}")
print()

# Auxiliary losses. Perfectly uniform routing gives exactly 1.0 for the
# load-balance loss and (ln N)^2 for the z-loss at uniform logits.
lb = load_balance_loss(route, N)
logits = h @ router.w_g.value
print(f"load-balance loss: {lb:.4f}   (uniform anchor 1.0)")
print(f"z-loss:            {z_loss(logits):.4f}   (uniform-logit anchor "
      f"(ln {N})^2 = {np.log(N) ** 2:.4f})")

# Force a collapse to see the loss move: a top-1 router whose first column
# dominates on all-positive inputs, so every token lands on expert 0. At full
# collapse f_0 = P_0 = 1 and the loss hits its maximum, N.
collapsed = Router(Parameter("w_g", np.zeros((D, N))), k=1)
collapsed.w_g.value[:, 0] = 10.0
_, route2, _ = MoeLayer(collapsed, experts).forward(np.abs(h))
print(f"collapsed router:  {load_balance_loss(route2, N):.4f}   "
      f"(full-collapse anchor N = {float(N):.1f})")
