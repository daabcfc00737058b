"""Decoder-only transformer with a routed MoE feed-forward in every block.

Pre-norm residual wiring throughout:

    h   = x + Attn(RMSNorm(x))
    out = h + Drop(MoE'(RMSNorm(h)))

where MoE' is the backbone mixture plus whatever PEFT wiring is attached.
Dropout acts on attention probabilities and on the MoE/PEFT sublayer output,
and is disabled at eval. All forwards return explicit caches consumed by the
matching backward, which accumulates into Parameter.grad (trainable only).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .moe import FfnExpert, MoeLayer, Router
from .numerics import (
    ConfigError,
    InputError,
    Module,
    Parameter,
    Rng,
    softmax_rows,
    softmax_rows_backward,
)
from .peft import AdaptedMoe, PerftConfig, attach_gate_lora, attach_qv_lora, make_adapted_moe

NEG_INF = -1e30


@dataclass
class ModelConfig:
    d: int
    l: int
    n_heads: int
    d_a: int
    n_experts: int
    k: int
    vocab: int
    t_max: int
    dropout: float = 0.05
    activation: str = "silu"
    ffn_gated: bool = False
    renormalize_topk: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if not (1 <= self.k <= self.n_experts):
            raise ConfigError(f"k={self.k} must lie in [1, n_experts={self.n_experts}]")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout={self.dropout} must lie in [0, 1)")
        for field in ("d", "l", "n_heads", "d_a", "vocab", "t_max"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1")


class RmsNorm(Module):
    """y = x * gain / sqrt(mean(x^2) + eps), along the last axis."""

    EPS = 1e-6

    def __init__(self, gain: Parameter):
        self.gain = gain

    def parameters(self):
        yield self.gain

    def forward(self, x: np.ndarray):
        r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + self.EPS)
        return x / r * self.gain.value, (x, r)

    def backward(self, cache, d_y: np.ndarray) -> np.ndarray:
        x, r = cache
        g = self.gain.value
        self.gain.accumulate(np.sum(d_y * x / r, axis=tuple(range(x.ndim - 1))))
        dyg = d_y * g
        d = x.shape[-1]
        inner = np.sum(dyg * x, axis=-1, keepdims=True)
        return dyg / r - x * inner / (d * r**3)


class Attention(Module):
    """Multi-head causal self-attention with optional q/v LoRA deltas."""

    def __init__(self, w_q: Parameter, w_k: Parameter, w_v: Parameter,
                 w_o: Parameter, n_heads: int):
        d = w_q.value.shape[0]
        for w in (w_q, w_k, w_v, w_o):
            if w.value.shape != (d, d):
                raise ConfigError(f"attention weights must be ({d}, {d}), got {w.value.shape}")
        if d % n_heads != 0:
            raise ConfigError(f"d={d} not divisible by n_heads={n_heads}")
        self.w_q, self.w_k, self.w_v, self.w_o = w_q, w_k, w_v, w_o
        self.n_heads = n_heads
        self.d = d
        self.d_head = d // n_heads
        self.q_lora = None
        self.v_lora = None

    def parameters(self):
        yield from (self.w_q, self.w_k, self.w_v, self.w_o)
        if self.q_lora is not None:
            yield from self.q_lora.parameters()
        if self.v_lora is not None:
            yield from self.v_lora.parameters()

    def _split(self, z2: np.ndarray, b: int, t: int) -> np.ndarray:
        # (B*T, D) -> (B, H, T, d_head)
        return z2.reshape(b, t, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, z: np.ndarray, b: int, t: int) -> np.ndarray:
        # (B, H, T, d_head) -> (B*T, D)
        return z.transpose(0, 2, 1, 3).reshape(b * t, self.d)

    def forward(self, x: np.ndarray, train: bool = False,
                rng: Optional[Rng] = None, p_drop: float = 0.0):
        b, t, d = x.shape
        x2 = x.reshape(b * t, d)
        q2 = x2 @ self.w_q.value
        qc = None
        if self.q_lora is not None:
            dq, qc = self.q_lora.forward(x2)
            q2 = q2 + dq
        k2 = x2 @ self.w_k.value
        v2 = x2 @ self.w_v.value
        vc = None
        if self.v_lora is not None:
            dv, vc = self.v_lora.forward(x2)
            v2 = v2 + dv
        q = self._split(q2, b, t)
        k = self._split(k2, b, t)
        v = self._split(v2, b, t)
        scale = 1.0 / np.sqrt(self.d_head)
        scores = q @ k.transpose(0, 1, 3, 2) * scale
        scores = scores + np.triu(np.full((t, t), NEG_INF), k=1)
        probs = softmax_rows(scores)
        dmask = None
        if train and p_drop > 0.0:
            dmask = (rng.uniform((b, self.n_heads, t, t)) >= p_drop) / (1.0 - p_drop)
            pd = probs * dmask
        else:
            pd = probs
        o = pd @ v
        om = self._merge(o, b, t)
        y2 = om @ self.w_o.value
        cache = (x2, q, k, v, probs, dmask, pd, om, qc, vc, (b, t, d), scale)
        return y2.reshape(b, t, d), cache

    def backward(self, cache, d_y: np.ndarray) -> np.ndarray:
        x2, q, k, v, probs, dmask, pd, om, qc, vc, (b, t, d), scale = cache
        d_y2 = d_y.reshape(b * t, d)
        self.w_o.accumulate(om.T @ d_y2)
        d_o = self._split(d_y2 @ self.w_o.value.T, b, t)
        d_pd = d_o @ v.transpose(0, 1, 3, 2)
        d_v = pd.transpose(0, 1, 3, 2) @ d_o
        d_probs = d_pd * dmask if dmask is not None else d_pd
        d_scores = softmax_rows_backward(probs, d_probs) * scale
        d_q = d_scores @ k
        d_k = d_scores.transpose(0, 1, 3, 2) @ q
        d_q2 = self._merge(d_q, b, t)
        d_k2 = self._merge(d_k, b, t)
        d_v2 = self._merge(d_v, b, t)
        self.w_q.accumulate(x2.T @ d_q2)
        self.w_k.accumulate(x2.T @ d_k2)
        self.w_v.accumulate(x2.T @ d_v2)
        d_x2 = d_q2 @ self.w_q.value.T + d_k2 @ self.w_k.value.T + d_v2 @ self.w_v.value.T
        if self.q_lora is not None:
            d_x2 += self.q_lora.backward(qc, d_q2)
        if self.v_lora is not None:
            d_x2 += self.v_lora.backward(vc, d_v2)
        return d_x2.reshape(b, t, d)


class TransformerBlock(Module):
    def __init__(self, norm_attn: RmsNorm, attn: Attention,
                 norm_moe: RmsNorm, adapted: AdaptedMoe, dropout: float):
        self.norm_attn = norm_attn
        self.attn = attn
        self.norm_moe = norm_moe
        self.adapted = adapted
        self.dropout = dropout

    def parameters(self):
        yield from self.norm_attn.parameters()
        yield from self.attn.parameters()
        yield from self.norm_moe.parameters()
        yield from self.adapted.parameters()

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[Rng] = None):
        b, t, d = x.shape
        a, c_n1 = self.norm_attn.forward(x)
        attn_out, c_attn = self.attn.forward(a, train, rng, self.dropout)
        h = x + attn_out
        m, c_n2 = self.norm_moe.forward(h)
        moe_out, info, c_moe = self.adapted.forward(m.reshape(b * t, d))
        moe_out = moe_out.reshape(b, t, d)
        dmask = None
        if train and self.dropout > 0.0:
            dmask = (rng.uniform((b, t, d)) >= self.dropout) / (1.0 - self.dropout)
            moe_out = moe_out * dmask
        out = h + moe_out
        return out, info, (c_n1, c_attn, c_n2, c_moe, dmask, (b, t, d))

    def backward(self, cache, d_out: np.ndarray, extras: Optional[dict] = None) -> np.ndarray:
        c_n1, c_attn, c_n2, c_moe, dmask, (b, t, d) = cache
        d_moe = d_out * dmask if dmask is not None else d_out
        d_m = self.adapted.backward(c_moe, d_moe.reshape(b * t, d), **(extras or {}))
        d_h = d_out + self.norm_moe.backward(c_n2, d_m.reshape(b, t, d))
        d_a = self.attn.backward(c_attn, d_h)
        return d_h + self.norm_attn.backward(c_n1, d_a)


@dataclass
class LmCache:
    tokens: np.ndarray
    block_caches: list
    infos: list
    final_cache: tuple
    xf: np.ndarray
    shape: tuple


class LanguageModel(Module):
    """Token embedding + learned positions, l blocks, RMSNorm, untied unembedding."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.perft_cfg: Optional[PerftConfig] = None
        std = cfg.init_std
        init = rng.child(0)
        self.embed = Parameter("embed", init.child(0).normal((cfg.vocab, cfg.d), std))
        self.pos = Parameter("pos", init.child(1).normal((cfg.t_max, cfg.d), std))
        self.blocks: list[TransformerBlock] = []
        for i in range(cfg.l):
            br = rng.child(i + 1)
            pre = f"blocks.{i}"
            norm1 = RmsNorm(Parameter(f"{pre}.norm_attn.gain", np.ones(cfg.d)))
            attn = Attention(
                Parameter(f"{pre}.attn.w_q", br.child(0).normal((cfg.d, cfg.d), std)),
                Parameter(f"{pre}.attn.w_k", br.child(1).normal((cfg.d, cfg.d), std)),
                Parameter(f"{pre}.attn.w_v", br.child(2).normal((cfg.d, cfg.d), std)),
                Parameter(f"{pre}.attn.w_o", br.child(3).normal((cfg.d, cfg.d), std)),
                cfg.n_heads,
            )
            norm2 = RmsNorm(Parameter(f"{pre}.norm_moe.gain", np.ones(cfg.d)))
            router = Router(
                Parameter(f"{pre}.moe.router.w_g", br.child(4).normal((cfg.d, cfg.n_experts), std)),
                cfg.k,
                cfg.renormalize_topk,
            )
            experts = []
            for j in range(cfg.n_experts):
                er = br.child(5 + j)
                w_gate = None
                if cfg.ffn_gated:
                    w_gate = Parameter(
                        f"{pre}.moe.experts.{j}.w_gate", er.child(2).normal((cfg.d, cfg.d_a), std)
                    )
                experts.append(
                    FfnExpert(
                        Parameter(f"{pre}.moe.experts.{j}.w_up", er.child(0).normal((cfg.d, cfg.d_a), std)),
                        Parameter(f"{pre}.moe.experts.{j}.w_down", er.child(1).normal((cfg.d_a, cfg.d), std)),
                        cfg.activation,
                        w_gate,
                    )
                )
            adapted = AdaptedMoe(MoeLayer(router, experts), "base")
            self.blocks.append(TransformerBlock(norm1, attn, norm2, adapted, cfg.dropout))
        self.final_norm = RmsNorm(Parameter("final_norm.gain", np.ones(cfg.d)))
        self.unembed = Parameter("unembed", rng.child(cfg.l + 1).normal((cfg.d, cfg.vocab), std))

    def parameters(self):
        yield self.embed
        yield self.pos
        for blk in self.blocks:
            yield from blk.parameters()
        yield from self.final_norm.parameters()
        yield self.unembed

    def reset_counters(self) -> None:
        for blk in self.blocks:
            for ex in blk.adapted.moe.experts:
                ex.tokens_routed = 0
            for ad in blk.adapted.adapters:
                ad.tokens_routed = 0

    def forward(self, tokens: np.ndarray, train: bool = False, rng: Optional[Rng] = None):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise InputError(f"tokens must be (batch, time), got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"tokens must be integers, got dtype {tokens.dtype}")
        b, t = tokens.shape
        if t > self.cfg.t_max:
            raise InputError(f"sequence length {t} exceeds t_max={self.cfg.t_max}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise InputError(
                f"token ids must lie in [0, {self.cfg.vocab}), got "
                f"[{tokens.min()}, {tokens.max()}]"
            )
        if train and self.cfg.dropout > 0.0 and rng is None:
            raise ConfigError("training forward with dropout needs an rng")
        x = self.embed.value[tokens] + self.pos.value[:t]
        block_caches = []
        infos = []
        for blk in self.blocks:
            x, info, cache = blk.forward(x, train, rng)
            block_caches.append(cache)
            infos.append(info)
        xf, c_final = self.final_norm.forward(x)
        logits = (xf.reshape(b * t, self.cfg.d) @ self.unembed.value).reshape(b, t, self.cfg.vocab)
        return logits, LmCache(tokens, block_caches, infos, c_final, xf, (b, t))

    def backward(self, cache: LmCache, d_logits: np.ndarray,
                 extras: Optional[list] = None) -> None:
        b, t = cache.shape
        d = self.cfg.d
        d_l2 = d_logits.reshape(b * t, self.cfg.vocab)
        xf2 = cache.xf.reshape(b * t, d)
        self.unembed.accumulate(xf2.T @ d_l2)
        d_x = (d_l2 @ self.unembed.value.T).reshape(b, t, d)
        d_x = self.final_norm.backward(cache.final_cache, d_x)
        for i in reversed(range(len(self.blocks))):
            ex = extras[i] if extras is not None else None
            d_x = self.blocks[i].backward(cache.block_caches[i], d_x, ex)
        if self.pos.trainable:
            self.pos.grad[:t] += d_x.sum(axis=0)
        if self.embed.trainable:
            np.add.at(self.embed.grad, cache.tokens.reshape(-1), d_x.reshape(b * t, d))


def lm_forward(model: LanguageModel, tokens: np.ndarray) -> np.ndarray:
    """Eval-mode logits, cache discarded."""
    logits, _ = model.forward(tokens, train=False)
    return logits


def build_model(cfg: ModelConfig, seed: int, perft: Optional[PerftConfig] = None) -> LanguageModel:
    rng = Rng(seed)
    model = LanguageModel(cfg, rng.child(0))
    if perft is not None:
        attach_variant(model, perft, rng.child(1))
    return model


def attach_variant(model: LanguageModel, cfg: PerftConfig, rng: Rng) -> PerftConfig:
    """Attach one PEFT wiring to every block of a built model. One shot:
    attaching twice is a config error. Returns the resolved config."""
    if model.perft_cfg is not None:
        raise ConfigError(f"model already carries variant {model.perft_cfg.variant!r}")
    cfg = cfg.resolved(model.cfg.n_experts)
    for i, blk in enumerate(model.blocks):
        r = rng.child(i)
        if cfg.variant == "qv_lora":
            attach_qv_lora(blk.attn, cfg.d_b, r, cfg.alpha, name=f"blocks.{i}.attn")
        elif cfg.variant == "gate_lora":
            attach_gate_lora(blk.adapted.moe.router, cfg.d_b, r, cfg.alpha,
                             name=f"blocks.{i}.moe.router")
        else:
            blk.adapted = make_adapted_moe(blk.adapted.moe, cfg, r, name=f"blocks.{i}.peft")
    model.perft_cfg = cfg
    return cfg
