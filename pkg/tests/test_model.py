"""Model-level tests: RMS norm, causal attention, block wiring, and the LM.

Hand oracles are computed inline (explicit per-position loops, closed-form
norm values); gradient paths are refereed by central finite differences.
"""

import numpy as np
import pytest

from perft_lab.model import (
    Attention,
    ModelConfig,
    RmsNorm,
    attach_variant,
    build_model,
    lm_forward,
)
from perft_lab.numerics import (
    ConfigError,
    InputError,
    Parameter,
    Rng,
    finite_diff_grad,
    max_rel_err,
    softmax_rows,
)
from perft_lab.peft import PerftConfig
from perft_lab.training import cross_entropy

TINY = dict(d=8, l=2, n_heads=2, d_a=6, n_experts=4, k=2,
            vocab=24, t_max=6, dropout=0.0)


def tiny_model(seed=3, **overrides):
    cfg = ModelConfig(**{**TINY, **overrides})
    return build_model(cfg, seed=seed)


def tiny_batch(model, b=2, t=5, seed=11):
    gen = Rng(seed)
    tokens = np.asarray(gen.integers(0, model.cfg.vocab, size=(b, t)))
    targets = np.asarray(gen.integers(0, model.cfg.vocab, size=(b, t)))
    mask = (gen.uniform((b, t)) > 0.4).astype(np.float64)
    mask[0, 0] = 1.0  # never fully masked
    return tokens, targets, mask


# ---------------------------------------------------------------- RmsNorm

def test_rmsnorm_hand_value():
    # x = [3, 4]: mean(x^2) = 12.5, rms = sqrt(12.5) = 3.5355339059327378
    norm = RmsNorm(Parameter("g", np.array([1.0, 2.0])))
    y, _ = norm.forward(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(
        y, [[0.8485281374238570, 2.2627416997969522]], atol=1e-5)


def test_rmsnorm_output_has_unit_rms():
    norm = RmsNorm(Parameter("g", np.ones(16)))
    x = Rng(0).normal((5, 16), 3.0)
    y, _ = norm.forward(x)
    rms = np.sqrt(np.mean(y * y, axis=-1))
    np.testing.assert_allclose(rms, np.ones(5), atol=1e-6)


def test_rmsnorm_scale_invariance():
    norm = RmsNorm(Parameter("g", Rng(1).normal(8)))
    x = Rng(2).normal((3, 8), 5.0)
    y1, _ = norm.forward(x)
    y2, _ = norm.forward(10.0 * x)
    np.testing.assert_allclose(y1, y2, atol=1e-7)


def test_rmsnorm_backward_matches_finite_differences():
    gain = Parameter("g", Rng(3).normal(6, 0.5) + 1.0)
    norm = RmsNorm(gain)
    x = Rng(4).normal((4, 6))
    w = Rng(5).normal((4, 6))

    def f():
        y, _ = norm.forward(x)
        return float(np.sum(y * w))

    fd_gain, fd_x = finite_diff_grad(f, [gain.value, x])
    gain.grad[...] = 0.0
    y, cache = norm.forward(x)
    d_x = norm.backward(cache, w)
    assert max_rel_err(gain.grad, fd_gain) < 1e-6
    assert max_rel_err(d_x, fd_x) < 1e-6


def test_rmsnorm_leading_axes_sum_in_gain_grad():
    # gain grad is summed over every leading axis, so a (B, T, D) input and
    # its flattened (B*T, D) view accumulate the same thing.
    gain = Parameter("g", np.ones(4) * 1.5)
    norm = RmsNorm(gain)
    x = Rng(6).normal((2, 3, 4))
    d_y = Rng(7).normal((2, 3, 4))
    _, cache = norm.forward(x)
    norm.backward(cache, d_y)
    g3 = gain.grad.copy()
    gain.grad[...] = 0.0
    _, cache = norm.forward(x.reshape(6, 4))
    norm.backward(cache, d_y.reshape(6, 4))
    np.testing.assert_allclose(g3, gain.grad, atol=1e-12)


# -------------------------------------------------------------- Attention

def make_attention(d, n_heads, seed=0):
    r = Rng(seed)
    return Attention(
        Parameter("w_q", r.child(0).normal((d, d), 0.3)),
        Parameter("w_k", r.child(1).normal((d, d), 0.3)),
        Parameter("w_v", r.child(2).normal((d, d), 0.3)),
        Parameter("w_o", r.child(3).normal((d, d), 0.3)),
        n_heads,
    )


def test_attention_single_token_is_value_path():
    # With one position the softmax is the scalar 1, so y = (x Wv) Wo exactly.
    attn = make_attention(6, 2, seed=1)
    x = Rng(2).normal((3, 1, 6))
    y, _ = attn.forward(x)
    want = (x.reshape(3, 6) @ attn.w_v.value @ attn.w_o.value).reshape(3, 1, 6)
    np.testing.assert_allclose(y, want, atol=1e-12)


def test_attention_hand_oracle_single_head():
    # Explicit per-query loop over allowed keys, built from scratch.
    d, t = 4, 3
    attn = make_attention(d, 1, seed=5)
    x = Rng(6).normal((1, t, d))
    y, _ = attn.forward(x)

    q = x[0] @ attn.w_q.value
    k = x[0] @ attn.w_k.value
    v = x[0] @ attn.w_v.value
    out = np.zeros((t, d))
    for i in range(t):
        scores = np.array([q[i] @ k[j] for j in range(i + 1)]) / np.sqrt(d)
        e = np.exp(scores - scores.max())
        p = e / e.sum()
        out[i] = sum(p[j] * v[j] for j in range(i + 1))
    want = out @ attn.w_o.value
    np.testing.assert_allclose(y[0], want, atol=1e-10)


def test_attention_multihead_matches_per_head_slices():
    d, h, t, b = 8, 2, 4, 2
    dh = d // h
    attn = make_attention(d, h, seed=7)
    x = Rng(8).normal((b, t, d))
    y, _ = attn.forward(x)

    causal = np.triu(np.full((t, t), -np.inf), k=1)
    for bi in range(b):
        q = x[bi] @ attn.w_q.value
        k = x[bi] @ attn.w_k.value
        v = x[bi] @ attn.w_v.value
        merged = np.zeros((t, d))
        for hi in range(h):
            sl = slice(hi * dh, (hi + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh) + causal
            merged[:, sl] = softmax_rows(scores) @ v[:, sl]
        np.testing.assert_allclose(y[bi], merged @ attn.w_o.value, atol=1e-10)


def test_attention_causality():
    attn = make_attention(8, 2, seed=9)
    x = Rng(10).normal((1, 5, 8))
    y1, _ = attn.forward(x)
    x2 = x.copy()
    x2[0, 3] += 1.0
    y2, _ = attn.forward(x2)
    assert np.array_equal(y1[0, :3], y2[0, :3])
    assert np.abs(y1[0, 3:] - y2[0, 3:]).max() > 1e-6


def test_attention_backward_matches_finite_differences():
    attn = make_attention(6, 2, seed=11)
    x = Rng(12).normal((2, 3, 6))
    w = Rng(13).normal((2, 3, 6))
    weights = [attn.w_q, attn.w_k, attn.w_v, attn.w_o]

    def f():
        y, _ = attn.forward(x)
        return float(np.sum(y * w))

    fd = finite_diff_grad(f, [p.value for p in weights] + [x])
    for p in weights:
        p.grad[...] = 0.0
    _, cache = attn.forward(x)
    d_x = attn.backward(cache, w)
    for p, g in zip(weights, fd[:4]):
        assert max_rel_err(p.grad, g) < 1e-6, p.name
    assert max_rel_err(d_x, fd[4]) < 1e-6


def test_attention_dropout_reproducible_and_off_at_eval():
    attn = make_attention(8, 2, seed=14)
    x = Rng(15).normal((2, 4, 8))
    e1, _ = attn.forward(x)
    e2, _ = attn.forward(x)
    assert np.array_equal(e1, e2)
    t1, _ = attn.forward(x, train=True, rng=Rng(99).child(1), p_drop=0.5)
    t2, _ = attn.forward(x, train=True, rng=Rng(99).child(1), p_drop=0.5)
    assert np.array_equal(t1, t2)
    assert np.abs(t1 - e1).max() > 1e-6


# ------------------------------------------------------------------ Block

def test_block_residual_passthrough_when_sublayers_zeroed():
    model = tiny_model()
    blk = model.blocks[0]
    blk.attn.w_o.value[...] = 0.0
    for ex in blk.adapted.moe.experts:
        ex.w_down.value[...] = 0.0
    x = Rng(16).normal((2, 4, model.cfg.d))
    out, _, _ = blk.forward(x)
    assert np.array_equal(out, x)


def test_block_causality_through_full_model():
    model = tiny_model()
    tokens, _, _ = tiny_batch(model)
    logits1 = lm_forward(model, tokens)
    tokens2 = tokens.copy()
    tokens2[:, 3] = (tokens2[:, 3] + 1) % model.cfg.vocab
    logits2 = lm_forward(model, tokens2)
    assert np.array_equal(logits1[:, :3], logits2[:, :3])
    assert np.abs(logits1[:, 3:] - logits2[:, 3:]).max() > 1e-9


# ---------------------------------------------------------- LanguageModel

def test_build_model_is_deterministic():
    m1 = tiny_model(seed=21)
    m2 = tiny_model(seed=21)
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.value, p2.value), n1
    tokens, _, _ = tiny_batch(m1)
    assert np.array_equal(lm_forward(m1, tokens), lm_forward(m2, tokens))


def test_build_model_seed_matters():
    m1 = tiny_model(seed=21)
    m2 = tiny_model(seed=22)
    assert not np.array_equal(m1.embed.value, m2.embed.value)


def test_parameter_names_unique_and_roled():
    model = tiny_model()
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))
    assert all(p.role == "backbone" for p in model.parameters())


def test_initial_ce_near_uniform():
    # 0.02-scale init keeps logits close to zero, so the first cross entropy
    # sits just above ln(vocab).
    model = tiny_model(vocab=48)
    tokens, targets, mask = tiny_batch(model)
    logits = lm_forward(model, tokens)
    ce, _ = cross_entropy(logits, targets, mask)
    assert abs(ce - np.log(48)) < 0.05


def test_forward_accepts_1d_tokens():
    model = tiny_model()
    tokens = np.arange(4)
    logits = lm_forward(model, tokens)
    assert logits.shape == (1, 4, model.cfg.vocab)


def test_forward_input_validation():
    model = tiny_model()
    with pytest.raises(InputError):
        model.forward(np.zeros((2, 2, 2), dtype=np.int64))
    with pytest.raises(InputError):
        model.forward(np.zeros((1, 3)))  # float dtype
    with pytest.raises(InputError):
        model.forward(np.zeros((1, model.cfg.t_max + 1), dtype=np.int64))
    with pytest.raises(InputError):
        model.forward(np.full((1, 2), model.cfg.vocab, dtype=np.int64))
    with pytest.raises(InputError):
        model.forward(np.full((1, 2), -1, dtype=np.int64))


def test_train_forward_without_rng_rejected_when_dropout_on():
    model = tiny_model(dropout=0.1)
    tokens, _, _ = tiny_batch(model)
    with pytest.raises(ConfigError):
        model.forward(tokens, train=True)
    logits, _ = model.forward(tokens, train=True, rng=Rng(0).child(1))
    assert np.all(np.isfinite(logits))


def test_dropout_training_forward_reproducible():
    model = tiny_model(dropout=0.2)
    tokens, _, _ = tiny_batch(model)
    a, _ = model.forward(tokens, train=True, rng=Rng(7).child(1))
    b, _ = model.forward(tokens, train=True, rng=Rng(7).child(1))
    c = lm_forward(model, tokens)
    assert np.array_equal(a, b)
    assert np.abs(a - c).max() > 1e-9


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(**{**TINY, "n_heads": 3})  # 8 % 3 != 0
    with pytest.raises(ConfigError):
        ModelConfig(**{**TINY, "k": 5})
    with pytest.raises(ConfigError):
        ModelConfig(**{**TINY, "dropout": 1.0})
    with pytest.raises(ConfigError):
        ModelConfig(**{**TINY, "t_max": 0})


def test_attach_variant_once_only():
    model = tiny_model()
    attach_variant(model, PerftConfig("S", d_b=2), Rng(5))
    assert model.perft_cfg is not None and model.perft_cfg.variant == "S"
    peft_names = [p.name for p in model.parameters() if p.role == "peft"]
    assert len(peft_names) == 2 * model.cfg.l  # w_down + w_up per block
    assert all(n.startswith("blocks.") for n in peft_names)
    with pytest.raises(ConfigError):
        attach_variant(model, PerftConfig("S", d_b=2), Rng(5))


def test_build_model_with_perft_argument():
    m = build_model(ModelConfig(**TINY), seed=4, perft=PerftConfig("D", d_b=2, m=2))
    assert m.perft_cfg.variant == "D"
    assert any(p.role == "peft" for p in m.parameters())


def test_reset_counters():
    model = tiny_model()
    tokens, _, _ = tiny_batch(model)
    lm_forward(model, tokens)
    counts = [ex.tokens_routed for blk in model.blocks for ex in blk.adapted.moe.experts]
    assert sum(counts) == tokens.size * model.cfg.k * model.cfg.l
    model.reset_counters()
    assert all(ex.tokens_routed == 0 for blk in model.blocks
               for ex in blk.adapted.moe.experts)


# ------------------------------------------------- full-model gradient FD

def test_full_model_gradients_match_finite_differences():
    # Every backbone parameter, cross-entropy objective, dropout off. Routing
    # margins are checked so +/-eps perturbations cannot flip a top-k choice.
    model = tiny_model(seed=3)
    tokens, targets, mask = tiny_batch(model)

    _, cache = model.forward(tokens)
    for info in cache.infos:
        probs = np.sort(info.backbone.probs, axis=1)
        gap = probs[:, -model.cfg.k] - probs[:, -model.cfg.k - 1]
        assert gap.min() > 1e-4, "routing margin too small for a stable FD check"

    def f():
        logits, _ = model.forward(tokens)
        return cross_entropy(logits, targets, mask)[0]

    params = list(model.parameters())
    fd = finite_diff_grad(f, [p.value for p in params])
    model.zero_grad()
    logits, cache = model.forward(tokens)
    _, d_logits = cross_entropy(logits, targets, mask)
    model.backward(cache, d_logits)
    worst = max(max_rel_err(p.grad, g) for p, g in zip(params, fd))
    assert worst < 1e-6, f"worst rel err {worst:.3e}"


def test_frozen_embed_keeps_zero_grad():
    model = tiny_model()
    model.embed.trainable = False
    model.pos.trainable = False
    tokens, targets, mask = tiny_batch(model)
    model.zero_grad()
    logits, cache = model.forward(tokens)
    _, d_logits = cross_entropy(logits, targets, mask)
    model.backward(cache, d_logits)
    assert np.all(model.embed.grad == 0.0)
    assert np.all(model.pos.grad == 0.0)
    assert np.abs(model.unembed.grad).max() > 0.0
