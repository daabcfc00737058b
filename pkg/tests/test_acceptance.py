"""Acceptance checklist: ten end-to-end criteria, one test per criterion.

Covers the published parameter-accounting anchors, the embedded/routed
equivalence, zero-init transparency, per-variant gradient oracles, frozen
backbone invariance, the routing and auxiliary-loss contracts, the capacity
estimator against Monte-Carlo and closed-form anchors, a desk-scale
pretrain-then-finetune learning run, and the analysis pipeline. The learning
run is the expensive part (several minutes); it is computed once in a
module-scoped fixture shared by the last two criteria.

Tolerances are stated inline next to the asserts they govern.
"""

import json
import math

import numpy as np
import pytest

from perft_lab.analysis import (
    RedundancyModel,
    effective_count,
    redundancy_estimate,
    routing_stats,
)
from perft_lab.checkpoint import backbone_checksum, load_checkpoint, save_checkpoint
from perft_lab.cli import main as cli_main
from perft_lab.data import ByteTokenizer, TaskSpec, encode_batch, generate_samples
from perft_lab.model import ModelConfig, attach_variant, build_model
from perft_lab.moe import (
    FfnExpert,
    MoeLayer,
    RouteResult,
    Router,
    load_balance_loss,
    load_balance_loss_backward,
    route,
    z_loss,
    z_loss_backward,
)
from perft_lab.numerics import Parameter, Rng, chi2_cdf, finite_diff_grad, max_rel_err
from perft_lab.peft import (
    OLMOE_1B_7B,
    VARIANTS,
    PerftConfig,
    count_activated,
    make_peft_expert,
    perft_e_forward,
    perft_r_forward,
)
from perft_lab.training import (
    TrainConfig,
    evaluate,
    freeze_partition,
    loss_and_grads,
    train_loop,
)

TOK = ByteTokenizer()


def variant_cfg(variant: str, d_b: int = 2) -> PerftConfig:
    if variant == "R":
        return PerftConfig("R", d_b=d_b, m=3, k_peft=2)
    if variant == "D":
        return PerftConfig("D", d_b=d_b, m=2)
    return PerftConfig(variant, d_b=d_b)


# ---------------------------------------------------- 1: param accounting

def test_criterion_01_parameter_accounting_anchors():
    # Reference geometry d=2048, 16 layers, 64 experts top-8; exact counts
    # before any rounding, then the rounded human forms.
    anchors = [
        (PerftConfig("qv_lora", d_b=4), 524_288, 524_288, "0.52M", "0.041%"),
        (PerftConfig("S", d_b=4), 262_144, 262_144, "0.26M", "0.020%"),
        (PerftConfig("D", d_b=4, m=2), 524_288, 524_288, "0.52M", None),
        (PerftConfig("E", d_b=4), 2_097_152, 16_777_216, "2.10M", "0.164%"),
        (PerftConfig("R", d_b=32, m=4, k_peft=1), 2_228_224, 8_519_680,
         "2.23M", "0.174%"),
    ]
    for cfg, activated, total, human, pct in anchors:
        acct = count_activated(cfg, OLMOE_1B_7B)
        assert acct.activated_trainable == activated, cfg
        assert acct.total_trainable == total, cfg
        assert acct.activated_total_model == 1_281_884_160
        assert f"{acct.activated_trainable / 1e6:.2f}M" == human, cfg
        if pct is not None:
            assert f"{acct.ratio_percent:.3f}%" == pct, cfg
    print("[criterion 1] PASS: five accounting anchors exact")


# ------------------------------------------- 2: embedded/routed identity

def test_criterion_02_embedded_equals_routed_shared_router():
    # One adapter per expert sharing the backbone gates must agree with a
    # routed wiring whose own router IS the backbone router (m=n, k_peft=k),
    # to 1e-12 over 100 random instances at d=16, n=4, k=2, d_b=4.
    d, n, k, d_b, d_a, t = 16, 4, 2, 4, 24, 8
    worst = 0.0
    for trial in range(100):
        rng = Rng(5000 + trial)
        router = Router(Parameter("w_g", rng.child(0).normal((d, n), 0.5)), k=k)
        experts = [
            FfnExpert(
                Parameter(f"e{i}.w_up", rng.child(1, i).normal((d, d_a), 0.1)),
                Parameter(f"e{i}.w_down", rng.child(2, i).normal((d_a, d), 0.1)),
            )
            for i in range(n)
        ]
        moe = MoeLayer(router, experts)
        pcfg = PerftConfig("E", d_b=d_b).resolved(n)
        adapters = []
        for i in range(n):
            ad = make_peft_expert(f"a{i}", d, pcfg, rng.child(3, i))
            ad.w_up.value[...] = rng.child(4, i).normal((d_b, d), 0.1)
            adapters.append(ad)
        h = rng.child(5).normal((t, d))
        y_e, _ = perft_e_forward(moe, adapters, h)
        y_r, _, _ = perft_r_forward(moe, router, adapters, h)
        worst = max(worst, float(np.abs(y_e - y_r).max()))
    assert worst < 1e-12, f"max discrepancy {worst:.3e}"
    print(f"[criterion 2] PASS: embedded == routed(shared router), "
          f"max |diff| {worst:.3e} over 100 instances")


# --------------------------------------------- 3: zero-init transparency

def test_criterion_03_zero_init_transparency_bitwise():
    cfg = ModelConfig(d=16, l=2, n_heads=2, d_a=12, n_experts=4, k=2,
                      vocab=40, t_max=8, dropout=0.0)
    tokens = np.asarray(Rng(7).integers(0, cfg.vocab, size=(3, 8)))
    ref, _ = build_model(cfg, seed=5).forward(tokens)
    for variant in VARIANTS:
        model = build_model(cfg, seed=5, perft=variant_cfg(variant, d_b=4))
        got, _ = model.forward(tokens)
        assert np.array_equal(got, ref), f"{variant} logits moved at init"
    print("[criterion 3] PASS: all six variants bitwise transparent at init")


# ------------------------------------------------- 4: gradient oracles

def test_criterion_04_gradient_oracle_every_variant():
    # Full-model central differences at d=8, l=2, n=4, k=2, d_b=2, t=5.
    # Zero-initialized adapter halves are nudged so their gradient paths are
    # exercised; router columns are widened so the finite-difference probe
    # never crosses a top-k boundary (sorted-prob margin > 1e-4 >> eps=1e-5).
    cfg = ModelConfig(d=8, l=2, n_heads=2, d_a=6, n_experts=4, k=2,
                      vocab=24, t_max=6, dropout=0.0)
    worst_by_variant = {}
    for variant in VARIANTS:
        model = build_model(cfg, seed=3, perft=variant_cfg(variant, d_b=2))
        nudge = Rng(77)
        for j, p in enumerate(model.parameters()):
            if p.role == "peft" and not np.any(p.value):
                p.value[...] = nudge.child(j).normal(p.value.shape, 0.05)
            if p.name.endswith("router.w_g"):
                p.value *= 30.0
        batch = {
            "tokens": np.asarray(Rng(12).integers(0, cfg.vocab, size=(2, 5))),
            "targets": np.asarray(Rng(13).integers(0, cfg.vocab, size=(2, 5))),
            "mask": np.ones((2, 5)),
        }
        _, cache = model.forward(batch["tokens"])
        for info in cache.infos:
            for rt, kk in ((info.backbone, cfg.k),
                           (info.peft, model.perft_cfg.k_peft)):
                if rt is None:
                    continue
                srt = np.sort(rt.probs, axis=1)
                assert (srt[:, -kk] - srt[:, -kk - 1]).min() > 1e-4

        params = [p for p in model.parameters() if p.trainable]

        def f():
            return loss_and_grads(model, batch, aux_coef=0.05,
                                  backward=False).total

        fd = finite_diff_grad(f, [p.value for p in params])
        model.zero_grad()
        loss_and_grads(model, batch, aux_coef=0.05)
        worst = max(max_rel_err(p.grad, g) for p, g in zip(params, fd))
        assert worst < 1e-6, f"{variant}: worst rel err {worst:.3e}"
        worst_by_variant[variant] = worst
    top = max(worst_by_variant.values())
    print(f"[criterion 4] PASS: full-model FD < 1e-6 for all six variants "
          f"(worst {top:.3e})")


# --------------------------------------------- 5: frozen-backbone bytes

def test_criterion_05_backbone_bytes_frozen_through_finetuning():
    cfg = ModelConfig(d=16, l=2, n_heads=2, d_a=8, n_experts=4, k=2,
                      vocab=260, t_max=12, dropout=0.05)
    samples = generate_samples(TaskSpec(kind="copy", min_len=2, max_len=3,
                                        seed=5), 128)
    train_cfg = TrainConfig(lr=1e-2, warmup_steps=10, batch_size=8,
                            max_steps=100, seed=2, eval_every=100)
    for variant in VARIANTS:
        model = build_model(cfg, seed=1, perft=variant_cfg(variant, d_b=4))
        before = backbone_checksum(model)
        freeze_partition(model)
        train_loop(model, samples, TOK, train_cfg)
        assert backbone_checksum(model) == before, variant
    print("[criterion 5] PASS: backbone checksum stable over 100 steps, "
          "all six variants")


# ------------------------------------------------- 6: routing contract

def test_criterion_06_routing_contract_against_brute_force():
    d, n, k, t = 16, 8, 3, 1000
    rng = Rng(42)
    h = rng.child(0).normal((t, d))
    h[::97] = 0.0  # exact-tie rows: all logits equal, lowest indices win
    w = rng.child(1).normal((d, n), 0.7)
    res = route(Router(Parameter("w_g", w), k=k), h)

    # independent probabilities straight from the definition
    z = h @ w
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    assert np.abs(probs - res.probs).max() < 1e-12

    for row in range(t):
        expect = sorted(sorted(range(n),
                               key=lambda i: (-probs[row, i], i))[:k])
        assert list(res.topk_idx[row]) == expect, f"row {row}"
        nz = np.nonzero(res.gates[row])[0]
        assert nz.size <= k
        assert set(nz.tolist()) <= set(expect)
        assert np.array_equal(res.gates[row, expect], res.probs[row, expect])
    assert list(res.topk_idx[0]) == [0, 1, 2]  # the tie row

    renorm = route(Router(Parameter("w_g", w.copy()), k=k,
                          renormalize_topk=True), h)
    kept = renorm.gates.sum(axis=1)
    assert np.abs(kept - 1.0).max() < 1e-12
    print("[criterion 6] PASS: top-k selection matches brute force on 1000 "
          "tokens incl. ties; renormalized gates sum to 1")


# ------------------------------------------------ 7: auxiliary losses

def test_criterion_07_aux_loss_anchors_and_gradients():
    n, k, t = 4, 2, 8
    # Exhaustively uniform fixture: every expert appears t*k/n = 4 times.
    probs = np.full((t, n), 1.0 / n)
    topk = np.array([[0, 1], [2, 3], [0, 2], [1, 3],
                     [0, 3], [1, 2], [0, 1], [2, 3]])
    rr = RouteResult(probs=probs, gates=probs * 0.0, topk_idx=topk)
    assert abs(load_balance_loss(rr, n) - 1.0) < 1e-12
    assert abs(z_loss(np.zeros((t, n))) - math.log(n) ** 2) < 1e-12

    # z-loss gradient against central differences
    gen = Rng(3)
    logits = gen.normal((6, n), 1.0)
    fd = finite_diff_grad(lambda: z_loss(logits), [logits])[0]
    assert max_rel_err(z_loss_backward(logits), fd) < 1e-6

    # load-balance gradient through the router (dispatch counts are a
    # straight-through constant, so margins keep the FD on one selection)
    d = 12
    w = Parameter("w_g", gen.child(1).normal((d, n), 1.0))
    router = Router(w, k)
    h = gen.child(2).normal((10, d))
    result, cache = router.route(h)
    srt = np.sort(result.probs, axis=1)
    assert (srt[:, -k] - srt[:, -k - 1]).min() > 1e-4

    def f():
        return load_balance_loss(route(router, h), n)

    fd_w, fd_h = finite_diff_grad(f, [w.value, h])
    d_h = router.route_backward(cache, np.zeros_like(result.probs),
                                d_probs_extra=load_balance_loss_backward(result, n))
    assert max_rel_err(w.grad, fd_w) < 1e-6
    assert max_rel_err(d_h, fd_h) < 1e-6
    print("[criterion 7] PASS: uniform anchors exact; both aux gradients "
          "match finite differences")


# --------------------------------------------- 8: capacity estimator

def test_criterion_08_capacity_estimator_oracles():
    # chi2 CDF against a fixed-seed million-sample Monte-Carlo draw
    gen = np.random.default_rng(123)
    grid = [(1, (0.5, 2.0)), (2, (1.0, 3.0)), (4, (2.0, 6.0)),
            (8, (4.0, 10.0)), (16, (10.0, 20.0)), (64, (50.0, 80.0))]
    worst = 0.0
    for dof, xs in grid:
        sample = gen.chisquare(dof, size=1_000_000)
        for x in xs:
            mc = float(np.mean(sample <= x))
            worst = max(worst, abs(float(chi2_cdf(x, dof)) - mc))
    assert worst < 2e-3, f"worst MC gap {worst:.2e}"

    # closed-form half-capacity point: exponent ln 2 gives eta = 1/2
    m, d_b, eps = 4, 8, 1.0
    p0 = float(chi2_cdf(d_b * eps**2 / 4.0, d_b))
    gamma_half = math.log(2.0) / (m * d_b * p0**2)
    est = redundancy_estimate(RedundancyModel(m, d_b, eps, gamma_half))
    assert abs(est.eta - 0.5) < 1e-12

    etas = [redundancy_estimate(RedundancyModel(m, d_b, eps, g)).eta
            for g in np.linspace(0.0, 60.0, 50)]
    assert all(b > a for a, b in zip(etas, etas[1:]))
    print(f"[criterion 8] PASS: chi2 within {worst:.1e} of Monte Carlo; "
          "eta(gamma_ln2) = 1/2 exact; eta strictly monotone")


# -------------------------------------- 9 and 10: the desk-scale run

TOY_BACKBONE = ModelConfig(d=64, l=4, n_heads=8, d_a=128, n_experts=8, k=2,
                           vocab=260, t_max=32, dropout=0.05)
PRETRAIN_CFG = TrainConfig(lr=1e-3, warmup_steps=100, batch_size=16,
                           max_steps=5000, aux_coef=0.01, seed=0,
                           eval_every=5000)
FINETUNE_CFG = TrainConfig(lr=3e-3, warmup_steps=100, batch_size=16,
                           max_steps=3000, aux_coef=0.01, seed=1,
                           eval_every=3000)
R_RECIPE = PerftConfig("R", d_b=8, m=2, k_peft=2, alpha=32)


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    """Pretrain once, fine-tune four times (R twice for reproducibility,
    then S at two widths); shared by the last two criteria."""
    root = tmp_path_factory.mktemp("toy_runs")
    ckpt = str(root / "backbone")

    pre = generate_samples(TaskSpec(kind="markov_text", min_len=16, max_len=24,
                                    order=2, alphabet_size=26, seed=1000),
                           8192 + 256)
    model = build_model(TOY_BACKBONE, seed=0)
    train_loop(model, pre[:8192], TOK, PRETRAIN_CFG, eval_samples=pre[8192:])
    save_checkpoint(ckpt, model)

    rev_train = generate_samples(TaskSpec(kind="reverse", min_len=2, max_len=2,
                                          seed=2000), 8192)
    rev_eval = generate_samples(TaskSpec(kind="reverse", min_len=2, max_len=2,
                                         seed=2001), 256)

    base_acc = evaluate(load_checkpoint(ckpt), rev_eval, TOK)["token_accuracy"]

    def finetune(pcfg):
        m = load_checkpoint(ckpt)
        attach_variant(m, pcfg, Rng(1).child(7))
        freeze_partition(m)
        train_loop(m, rev_train, TOK, FINETUNE_CFG)
        return m, evaluate(m, rev_eval, TOK)["token_accuracy"]

    model_r, acc_r = finetune(R_RECIPE)
    model_r2, acc_r2 = finetune(R_RECIPE)
    _, acc_s8 = finetune(PerftConfig("S", d_b=8, alpha=32))
    _, acc_s64 = finetune(PerftConfig("S", d_b=64, alpha=32))
    return {
        "root": root, "checkpoint": ckpt, "eval_task_seed": 2001,
        "base": base_acc, "R": acc_r, "S8": acc_s8, "S64": acc_s64,
        "model_r": model_r, "model_r2": model_r2, "R_rerun": acc_r2,
        "rev_eval": rev_eval,
    }


def test_criterion_09_desk_scale_learning_run(toy_runs):
    r, base = toy_runs["R"], toy_runs["base"]
    assert r >= 0.95, f"routed adapters reached only {r:.4f}"
    assert r - base >= 0.20, f"gain over frozen base only {r - base:.4f}"
    assert toy_runs["S64"] <= toy_runs["S8"] + 0.02, (
        f"S64 {toy_runs['S64']:.4f} vs S8 {toy_runs['S8']:.4f}")

    assert toy_runs["R_rerun"] == r  # same seeds, same accuracy, exactly
    pairs = zip(toy_runs["model_r"].parameters(),
                toy_runs["model_r2"].parameters())
    for p, q in pairs:
        assert p.name == q.name and np.array_equal(p.value, q.value)
    print(f"[criterion 9] PASS: R {r:.4f} (base {base:.4f}), "
          f"S8 {toy_runs['S8']:.4f}, S64 {toy_runs['S64']:.4f}, "
          "rerun bit-identical")


def test_criterion_10_analysis_pipeline(toy_runs):
    model = toy_runs["model_r"]

    # the analyze command, twice, must emit byte-identical artifacts
    ft_ckpt = str(toy_runs["root"] / "ft_r")
    save_checkpoint(ft_ckpt, model)
    outs = []
    for sub in ("an1", "an2"):
        out = toy_runs["root"] / sub
        cfg_path = toy_runs["root"] / f"{sub}.json"
        cfg_path.write_text(json.dumps({
            "backbone": ft_ckpt,
            "out_dir": str(out),
            "task": {"kind": "reverse", "min_len": 2, "max_len": 2,
                     "seed": toy_runs["eval_task_seed"]},
            "n_eval": 64,
        }))
        assert cli_main(["analyze", "--config", str(cfg_path),
                         "--layer", "1", "--eps", "0.05"]) == 0
        outs.append(out)
    for name in ("atlas_layer1.csv", "atlas_layer1.svg", "routing.csv",
                 "redundancy.json"):
        a = (outs[0] / name).read_bytes()
        assert a == (outs[1] / name).read_bytes(), name
        assert len(a) > 0

    # effective_count against an independent pairwise oracle
    def oracle(vectors, eps):
        kept = []
        for v in vectors:
            if all(math.sqrt(float(np.sum((u - v) ** 2))) > eps for u in kept):
                kept.append(v)
        return len(kept)

    gen = Rng(99)
    for trial in range(10):
        dim = 3 + trial % 5
        base = gen.child(trial, 0).normal((6 + trial * 3, dim))
        dup = base[:: 3] + gen.child(trial, 1).normal(
            (base[::3].shape[0], dim), 0.01)
        vectors = np.vstack([base, dup])
        for eps in (0.05, 0.5):
            assert effective_count(vectors, eps) == oracle(vectors, eps)

    # dispatch fractions are a distribution per layer
    batch = encode_batch(toy_runs["rev_eval"][:64], TOK, model.cfg.t_max)
    for st in routing_stats(model, batch["tokens"]):
        assert abs(st.dispatch_fraction.sum() - 1.0) < 1e-12
        if st.peft_dispatch_fraction is not None:
            assert abs(st.peft_dispatch_fraction.sum() - 1.0) < 1e-12
    print("[criterion 10] PASS: analyze deterministic; effective_count "
          "matches oracle on 10 fixtures; dispatch fractions sum to 1")
