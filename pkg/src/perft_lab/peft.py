"""Parameter-efficient adaptation of a routed backbone.

A PEFT expert is a bottleneck delta d(h) = act(h @ w_down) @ w_up * (alpha/d_b)
with w_up zero-initialized so every freshly attached variant is an exact
identity at step zero. Four wirings place copies of it around a frozen
mixture-of-experts layer:

  R  routed:   an own top-k router over m adapters, added to the MoE output
  E  embedded: one adapter paired with each backbone expert, sharing the
               backbone's routing decision and gates
  D  dense:    m always-on adapters, no gating
  S  single:   dense with m = 1

Two MoE-agnostic baselines reuse the same low-rank delta: LoRA on the
attention q/v projections and LoRA on the router's gate matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .moe import MoeLayer, RouteResult, Router
from .numerics import ConfigError, Module, Parameter, Rng, matmul

VARIANTS = ("R", "E", "D", "S", "qv_lora", "gate_lora")

INIT_STD = 0.02


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ConfigError(f"unknown adapter activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    raise ConfigError(f"unknown adapter activation {kind!r}")


class PeftExpert(Module):
    """Bottleneck adapter: d(h) = act(h @ w_down) @ w_up * (alpha / d_b)."""

    def __init__(self, w_down: Parameter, w_up: Parameter, activation: str = "identity",
                 alpha: Optional[float] = None):
        d, d_b = w_down.value.shape
        if w_up.value.shape != (d_b, d):
            raise ConfigError(
                f"w_up shape {w_up.value.shape} does not invert w_down {w_down.value.shape}"
            )
        _act(activation, np.zeros(1))
        self.w_down = w_down
        self.w_up = w_up
        self.activation = activation
        self.d = d
        self.d_b = d_b
        self.alpha = float(alpha) if alpha is not None else float(d_b)
        self.scale = self.alpha / d_b
        self.tokens_routed = 0

    def parameters(self):
        yield self.w_down
        yield self.w_up

    def forward(self, h: np.ndarray):
        z = matmul(h, self.w_down.value)
        a = _act(self.activation, z)
        y = matmul(a, self.w_up.value) * self.scale
        return y, (h, z, a)

    def backward(self, cache, d_y: np.ndarray) -> np.ndarray:
        h, z, a = cache
        d_a = (d_y @ self.w_up.value.T) * self.scale
        self.w_up.accumulate(a.T @ d_y * self.scale)
        d_z = d_a * _act_grad(self.activation, z)
        self.w_down.accumulate(h.T @ d_z)
        return d_z @ self.w_down.value.T


def peft_forward(expert: PeftExpert, h: np.ndarray) -> np.ndarray:
    y, _ = expert.forward(h)
    return y


class LoraDelta(Module):
    """Low-rank additive delta (h @ a) @ b * (alpha / d_b), b zero-initialized."""

    def __init__(self, a: Parameter, b: Parameter, alpha: Optional[float] = None):
        d_in, d_b = a.value.shape
        if b.value.shape[0] != d_b:
            raise ConfigError(f"lora b shape {b.value.shape} does not chain after a {a.value.shape}")
        self.a = a
        self.b = b
        self.d_b = d_b
        self.alpha = float(alpha) if alpha is not None else float(d_b)
        self.scale = self.alpha / d_b

    def parameters(self):
        yield self.a
        yield self.b

    def forward(self, h: np.ndarray):
        z = matmul(h, self.a.value)
        delta = matmul(z, self.b.value) * self.scale
        return delta, (h, z)

    def backward(self, cache, d_delta: np.ndarray) -> np.ndarray:
        h, z = cache
        self.b.accumulate(z.T @ d_delta * self.scale)
        d_z = (d_delta @ self.b.value.T) * self.scale
        self.a.accumulate(h.T @ d_z)
        return d_z @ self.a.value.T


@dataclass
class PerftConfig:
    """Which variant to attach and at what size.

    m is the adapter count (required for R and D, forced to the expert count
    for E and to 1 for S); k_peft is the adapter router's top-k (R only).
    alpha defaults to d_b, giving unit scale.
    """

    variant: str
    d_b: int = 8
    m: Optional[int] = None
    k_peft: Optional[int] = None
    activation: str = "identity"
    alpha: Optional[float] = None
    renormalize_topk: bool = False
    peft_z_loss: bool = False

    def resolved(self, n_experts: int) -> "PerftConfig":
        """Fill and validate m / k_peft against a backbone with n experts."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_b < 1:
            raise ConfigError(f"d_b must be >= 1, got {self.d_b}")
        if self.activation not in ("identity", "relu"):
            raise ConfigError(f"adapter activation must be identity or relu, got {self.activation!r}")
        m, k_peft = self.m, self.k_peft
        if self.variant == "E":
            if m is not None and m != n_experts:
                raise ConfigError(f"embedded variant pairs one adapter per expert: m must be {n_experts}, got {m}")
            m, k_peft = n_experts, None
        elif self.variant == "S":
            if m is not None and m != 1:
                raise ConfigError(f"single variant has m=1, got m={m}")
            m, k_peft = 1, None
        elif self.variant == "D":
            if m is None or m < 1:
                raise ConfigError("dense variant needs m >= 1")
            k_peft = None
        elif self.variant == "R":
            if m is None or m < 1:
                raise ConfigError("routed variant needs m >= 1")
            if k_peft is None or not (1 <= k_peft <= m):
                raise ConfigError(f"routed variant needs 1 <= k_peft <= m={m}, got {k_peft}")
        else:  # qv_lora, gate_lora
            m, k_peft = None, None
        return replace(self, m=m, k_peft=k_peft)


@dataclass
class BackboneDims:
    """Backbone sizes that parameter accounting needs."""

    d: int
    l: int
    n: int
    k: int
    d_a: int
    activated_total_model: int


# Public OLMoE-1B-7B geometry: untied vocab 50304, gated 3-matrix experts.
# Activated total = 2*50304*2048 + 16*(4*2048^2 + 2048*64 + 8*3*2048*1024)
OLMOE_1B_7B = BackboneDims(
    d=2048, l=16, n=64, k=8, d_a=1024, activated_total_model=1_281_884_160
)


@dataclass
class ParamAccount:
    """Exact trainable-parameter counts for one attached variant."""

    variant: str
    activated_trainable: int
    total_trainable: int
    activated_total_model: int

    @property
    def ratio_percent(self) -> float:
        return 100.0 * self.activated_trainable / self.activated_total_model


def count_activated(cfg: PerftConfig, dims: BackboneDims) -> ParamAccount:
    """Closed-form parameter accounting, per layer times l.

    An adapter pair costs 2*d*d_b. Routed variants activate only their top
    k_peft adapters but always activate the adapter router (m*d). Embedded
    adapters ride the backbone's top-k. Dense variants activate everything.
    """
    cfg = cfg.resolved(dims.n)
    d, d_b = dims.d, cfg.d_b
    pair = 2 * d * d_b
    if cfg.variant == "qv_lora":
        act = tot = 2 * (d * d_b + d_b * d)
    elif cfg.variant == "gate_lora":
        act = tot = d * d_b + d_b * dims.n
    elif cfg.variant == "S":
        act = tot = pair
    elif cfg.variant == "D":
        act = tot = cfg.m * pair
    elif cfg.variant == "E":
        act = dims.k * pair
        tot = dims.n * pair
    else:  # R
        act = cfg.k_peft * pair + cfg.m * d
        tot = cfg.m * pair + cfg.m * d
    return ParamAccount(
        variant=cfg.variant,
        activated_trainable=act * dims.l,
        total_trainable=tot * dims.l,
        activated_total_model=dims.activated_total_model,
    )


def make_peft_expert(name: str, d: int, cfg: PerftConfig, rng: Rng) -> PeftExpert:
    w_down = Parameter(f"{name}.w_down", rng.normal((d, cfg.d_b), INIT_STD))
    w_up = Parameter(f"{name}.w_up", np.zeros((cfg.d_b, d)))
    w_down.role = "peft"
    w_up.role = "peft"
    return PeftExpert(w_down, w_up, cfg.activation, cfg.alpha)


@dataclass
class RouteInfo:
    """Routing observables for one layer, as seen by losses and analysis."""

    backbone: RouteResult
    backbone_logits: np.ndarray
    peft: Optional[RouteResult] = None
    peft_logits: Optional[np.ndarray] = None


class AdaptedMoe(Module):
    """A backbone MoE layer plus one attached PERFT wiring.

    variant "base" is the raw layer (also used under the qv/gate LoRA
    baselines, whose deltas live in the attention block and router).
    """

    def __init__(self, moe: MoeLayer, variant: str = "base",
                 adapters: Optional[list] = None, peft_router: Optional[Router] = None):
        self.moe = moe
        self.variant = variant
        self.adapters = adapters or []
        self.peft_mix = None
        if variant == "R":
            if peft_router is None:
                raise ConfigError("routed variant needs an adapter router")
            self.peft_mix = MoeLayer(peft_router, self.adapters)
        elif variant == "E":
            if len(self.adapters) != len(moe.experts):
                raise ConfigError(
                    f"embedded variant needs one adapter per expert: "
                    f"{len(self.adapters)} vs {len(moe.experts)}"
                )
        elif variant in ("D", "S"):
            if not self.adapters:
                raise ConfigError("dense variant needs at least one adapter")
        elif variant != "base":
            raise ConfigError(f"unknown adapted-moe variant {variant!r}")

    @property
    def n_experts(self) -> int:
        return self.moe.router.n_experts

    def parameters(self):
        yield from self.moe.parameters()
        if self.variant == "R":
            yield from self.peft_mix.router.parameters()
        for ad in self.adapters:
            yield from ad.parameters()

    def forward(self, h: np.ndarray):
        if self.variant == "E":
            y, result, mcache = self.moe.forward(h, companions=self.adapters)
            info = RouteInfo(result, mcache.router_cache.logits)
            return y, info, ("E", mcache, None)
        y, result, mcache = self.moe.forward(h)
        info = RouteInfo(result, mcache.router_cache.logits)
        if self.variant == "base":
            return y, info, ("base", mcache, None)
        if self.variant == "R":
            y2, result2, pcache = self.peft_mix.forward(h)
            info.peft = result2
            info.peft_logits = pcache.router_cache.logits
            return y + y2, info, ("R", mcache, pcache)
        # dense / single: every adapter sees every token
        acc = np.zeros_like(y)
        caches = []
        for ad in self.adapters:
            out, c = ad.forward(h)
            acc += out
            ad.tokens_routed += h.shape[0]
            caches.append(c)
        return y + acc, info, ("D", mcache, caches)

    def backward(self, cache, d_y: np.ndarray,
                 d_probs_extra=None, d_logits_extra=None,
                 d_peft_probs_extra=None, d_peft_logits_extra=None) -> np.ndarray:
        kind, mcache, extra = cache
        d_h = self.moe.backward(mcache, d_y, d_probs_extra, d_logits_extra)
        if kind == "R":
            d_h = d_h + self.peft_mix.backward(
                extra, d_y, d_peft_probs_extra, d_peft_logits_extra
            )
        elif kind == "D":
            for ad, c in zip(self.adapters, extra):
                d_h = d_h + ad.backward(c, d_y)
        return d_h


def make_adapted_moe(moe: MoeLayer, cfg: Optional[PerftConfig], rng: Rng,
                     name: str = "peft") -> AdaptedMoe:
    """Wrap a backbone MoE layer per the config; None means bare backbone."""
    if cfg is None or cfg.variant in ("qv_lora", "gate_lora"):
        return AdaptedMoe(moe, "base")
    cfg = cfg.resolved(moe.router.n_experts)
    d = moe.router.d
    adapters = [
        make_peft_expert(f"{name}.experts.{j}", d, cfg, rng.child(j)) for j in range(cfg.m)
    ]
    if cfg.variant == "R":
        w_g = Parameter(f"{name}.router.w_g", rng.child(cfg.m).normal((d, cfg.m), INIT_STD))
        w_g.role = "peft"
        peft_router = Router(w_g, cfg.k_peft, cfg.renormalize_topk)
        return AdaptedMoe(moe, "R", adapters, peft_router)
    return AdaptedMoe(moe, cfg.variant, adapters)


def perft_r_forward(moe: MoeLayer, peft_router: Router, adapters: list,
                    h: np.ndarray) -> tuple[np.ndarray, RouteResult, RouteResult]:
    """Functional routed wiring: backbone output plus routed adapter mixture."""
    y1, r1, _ = moe.forward(h)
    mix = MoeLayer(peft_router, adapters)
    y2, r2, _ = mix.forward(h)
    return y1 + y2, r1, r2


def perft_e_forward(moe: MoeLayer, adapters: list,
                    h: np.ndarray) -> tuple[np.ndarray, RouteResult]:
    """Functional embedded wiring: adapters share the backbone's gates."""
    y, result, _ = moe.forward(h, companions=adapters)
    return y, result


def perft_d_forward(moe: MoeLayer, adapters: list, h: np.ndarray) -> np.ndarray:
    """Functional dense wiring: all adapters always on."""
    y, _, _ = moe.forward(h)
    for ad in adapters:
        y = y + peft_forward(ad, h)
    return y


def attach_qv_lora(attn, d_b: int, rng: Rng, alpha: Optional[float] = None,
                   name: str = "attn") -> None:
    """Attach low-rank deltas to the attention q and v projections."""
    if getattr(attn, "q_lora", None) is not None or getattr(attn, "v_lora", None) is not None:
        raise ConfigError("attention already carries a LoRA delta")
    d = attn.w_q.value.shape[0]
    for tag, slot in (("q", "q_lora"), ("v", "v_lora")):
        a = Parameter(f"{name}.{slot}.a", rng.child(0 if tag == "q" else 1).normal((d, d_b), INIT_STD))
        b = Parameter(f"{name}.{slot}.b", np.zeros((d_b, d)))
        a.role = "peft"
        b.role = "peft"
        setattr(attn, slot, LoraDelta(a, b, alpha))


def attach_gate_lora(router: Router, d_b: int, rng: Rng,
                     alpha: Optional[float] = None, name: str = "router") -> None:
    """Attach a low-rank delta to the router's gate projection."""
    if router.lora is not None:
        raise ConfigError("router already carries a LoRA delta")
    d, n = router.w_g.value.shape
    a = Parameter(f"{name}.lora.a", rng.normal((d, d_b), INIT_STD))
    b = Parameter(f"{name}.lora.b", np.zeros((d_b, n)))
    a.role = "peft"
    b.role = "peft"
    router.lora = LoraDelta(a, b, alpha)
