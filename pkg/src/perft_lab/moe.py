"""Sparse mixture-of-experts core: routing, expert FFNs, auxiliary losses.

Gating follows the softmax-then-top-k convention: probabilities are computed
over all experts first, the top k survive, and the surviving probabilities are
used as combination weights without renormalization (a flag restores the
renormalizing style). The top-k mask is treated as a constant in backward
(straight-through selection), while probabilities remain differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import (
    ConfigError,
    DimensionError,
    Module,
    Parameter,
    logsumexp_rows,
    matmul,
    softmax_rows,
    softmax_rows_backward,
)


@dataclass
class RouteResult:
    """Routing decision for a batch of tokens.

    probs:    (T, N) softmax over all experts
    gates:    (T, N) combination weights, zero off the top-k
    topk_idx: (T, K) selected expert indices, ascending per row
    """

    probs: np.ndarray
    gates: np.ndarray
    topk_idx: np.ndarray


@dataclass
class RouterCache:
    h: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    mask: np.ndarray
    denom: Optional[np.ndarray]
    lora_cache: object


class Router(Module):
    """Linear router: logits = h @ w_g, gates from top-k of the softmax."""

    def __init__(self, w_g: Parameter, k: int, renormalize_topk: bool = False):
        d, n = w_g.value.shape
        if not (1 <= k <= n):
            raise ConfigError(f"router k={k} must lie in [1, n_experts={n}]")
        self.w_g = w_g
        self.k = k
        self.n_experts = n
        self.d = d
        self.renormalize_topk = renormalize_topk
        self.lora = None  # optional low-rank logit delta, see peft.attach_gate_lora

    def parameters(self):
        yield self.w_g
        if self.lora is not None:
            yield from self.lora.parameters()

    def logits(self, h: np.ndarray) -> tuple[np.ndarray, object]:
        z = matmul(h, self.w_g.value)
        lora_cache = None
        if self.lora is not None:
            delta, lora_cache = self.lora.forward(h)
            z = z + delta
        return z, lora_cache

    def route(self, h: np.ndarray) -> tuple[RouteResult, RouterCache]:
        z, lora_cache = self.logits(h)
        probs = softmax_rows(z)
        # stable sort on -probs: ties resolve to the lowest expert index
        order = np.argsort(-probs, axis=1, kind="stable")
        topk = np.sort(order[:, : self.k], axis=1)
        mask = np.zeros_like(probs)
        np.put_along_axis(mask, topk, 1.0, axis=1)
        gates = probs * mask
        denom = None
        if self.renormalize_topk:
            denom = gates.sum(axis=1, keepdims=True)
            gates = gates / denom
        result = RouteResult(probs=probs, gates=gates, topk_idx=topk)
        cache = RouterCache(h=h, logits=z, probs=probs, mask=mask, denom=denom, lora_cache=lora_cache)
        return result, cache

    def route_backward(
        self,
        cache: RouterCache,
        d_gates: np.ndarray,
        d_probs_extra: Optional[np.ndarray] = None,
        d_logits_extra: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Backprop through gating. Extra terms inject auxiliary-loss
        gradients that attach directly to probs (load balance) or logits
        (z-loss). Returns d_h; accumulates into router parameters."""
        if self.renormalize_topk:
            g = cache.mask * cache.probs / cache.denom
            inner = np.sum(d_gates * g, axis=1, keepdims=True)
            d_probs = cache.mask * (d_gates - inner) / cache.denom
        else:
            d_probs = d_gates * cache.mask
        if d_probs_extra is not None:
            d_probs = d_probs + d_probs_extra
        d_logits = softmax_rows_backward(cache.probs, d_probs)
        if d_logits_extra is not None:
            d_logits = d_logits + d_logits_extra
        self.w_g.accumulate(cache.h.T @ d_logits)
        d_h = d_logits @ self.w_g.value.T
        if self.lora is not None:
            d_h = d_h + self.lora.backward(cache.lora_cache, d_logits)
        return d_h


def route(router: Router, h: np.ndarray) -> RouteResult:
    """Functional view of Router.route, discarding the backward cache."""
    result, _ = router.route(h)
    return result


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "silu":
        return z / (1.0 + np.exp(-z))
    raise ConfigError(f"unknown activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    raise ConfigError(f"unknown activation {kind!r}")


class FfnExpert(Module):
    """Two-matrix feed-forward expert, optionally gated (GLU style).

    y = act(h @ w_up) @ w_down, or with a gate matrix
    y = [act(h @ w_up) * (h @ w_gate)] @ w_down.
    """

    def __init__(
        self,
        w_up: Parameter,
        w_down: Parameter,
        activation: str = "silu",
        w_gate: Optional[Parameter] = None,
    ):
        d, d_a = w_up.value.shape
        if w_down.value.shape != (d_a, d):
            raise DimensionError(
                f"w_down shape {w_down.value.shape} does not invert w_up {w_up.value.shape}"
            )
        if w_gate is not None and w_gate.value.shape != (d, d_a):
            raise DimensionError(f"w_gate shape {w_gate.value.shape} must match w_up")
        _act(activation, np.zeros(1))
        self.w_up = w_up
        self.w_down = w_down
        self.w_gate = w_gate
        self.activation = activation
        self.d = d
        self.d_a = d_a
        self.tokens_routed = 0

    def parameters(self):
        yield self.w_up
        yield self.w_down
        if self.w_gate is not None:
            yield self.w_gate

    def forward(self, h: np.ndarray):
        z = matmul(h, self.w_up.value)
        a = _act(self.activation, z)
        g = None
        if self.w_gate is not None:
            g = matmul(h, self.w_gate.value)
            a = a * g
        y = matmul(a, self.w_down.value)
        return y, (h, z, g, a)

    def backward(self, cache, d_y: np.ndarray) -> np.ndarray:
        h, z, g, a = cache
        d_a = d_y @ self.w_down.value.T
        self.w_down.accumulate(a.T @ d_y)
        d_h = np.zeros_like(h)
        if self.w_gate is not None:
            act_z = _act(self.activation, z)
            d_act = d_a * g
            d_g = d_a * act_z
            self.w_gate.accumulate(h.T @ d_g)
            d_h += d_g @ self.w_gate.value.T
        else:
            d_act = d_a
        d_z = d_act * _act_grad(self.activation, z)
        self.w_up.accumulate(h.T @ d_z)
        d_h += d_z @ self.w_up.value.T
        return d_h


def ffn_forward(expert: FfnExpert, h: np.ndarray) -> np.ndarray:
    y, _ = expert.forward(h)
    return y


@dataclass
class MoeCache:
    router_cache: RouterCache
    result: RouteResult
    per_expert: list
    companions: Optional[Sequence]
    shape: tuple


class MoeLayer(Module):
    """Router plus experts; dispatches each token to its top-k experts.

    `experts` may be any modules with the forward/backward protocol, so the
    same machinery serves both backbone FFN experts and routed adapter
    mixtures. With `companions`, expert i's output is augmented in place by
    companion i on the same rows (the paired-adapter wiring).
    """

    def __init__(self, router: Router, experts: Sequence):
        if len(experts) != router.n_experts:
            raise ConfigError(
                f"router expects {router.n_experts} experts, got {len(experts)}"
            )
        self.router = router
        self.experts = list(experts)

    def parameters(self):
        yield from self.router.parameters()
        for ex in self.experts:
            yield from ex.parameters()

    def forward(self, h: np.ndarray, companions: Optional[Sequence] = None):
        if companions is not None and len(companions) != len(self.experts):
            raise ConfigError(
                f"need one companion per expert: {len(companions)} vs {len(self.experts)}"
            )
        result, rcache = self.router.route(h)
        y = np.zeros_like(h)
        per_expert = []
        for i, ex in enumerate(self.experts):
            rows = np.nonzero(rcache.mask[:, i] > 0.0)[0]
            if rows.size == 0:
                per_expert.append(None)
                continue
            sub = h[rows]
            out, ecache = ex.forward(sub)
            ccache = None
            if companions is not None:
                extra, ccache = companions[i].forward(sub)
                out = out + extra
                companions[i].tokens_routed += int(rows.size)
            y[rows] += result.gates[rows, i][:, None] * out
            ex.tokens_routed += int(rows.size)
            per_expert.append((rows, ecache, ccache, out))
        cache = MoeCache(
            router_cache=rcache,
            result=result,
            per_expert=per_expert,
            companions=companions,
            shape=h.shape,
        )
        return y, result, cache

    def backward(
        self,
        cache: MoeCache,
        d_y: np.ndarray,
        d_probs_extra: Optional[np.ndarray] = None,
        d_logits_extra: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        gates = cache.result.gates
        d_h = np.zeros(cache.shape)
        d_gates = np.zeros_like(gates)
        for i, entry in enumerate(cache.per_expert):
            if entry is None:
                continue
            rows, ecache, ccache, out = entry
            d_rows = d_y[rows]
            d_gates[rows, i] = np.sum(d_rows * out, axis=1)
            d_out = gates[rows, i][:, None] * d_rows
            d_sub = self.experts[i].backward(ecache, d_out)
            if ccache is not None:
                d_sub = d_sub + cache.companions[i].backward(ccache, d_out)
            d_h[rows] += d_sub
        d_h += self.router.route_backward(
            cache.router_cache, d_gates, d_probs_extra, d_logits_extra
        )
        return d_h


def moe_forward(layer: MoeLayer, h: np.ndarray) -> tuple[np.ndarray, RouteResult]:
    y, result, _ = layer.forward(h)
    return y, result


def load_balance_loss(route_result: RouteResult, n_experts: int) -> float:
    """N * sum_i f_i * P_i with f the dispatch fraction and P the mean prob.

    f_i counts how often expert i appears among the top-k picks, normalized so
    sum_i f_i = 1; it is treated as a constant in backward. P_i is the mean
    softmax probability and carries the gradient. Uniform routing with an
    exhaustively uniform dispatch gives exactly 1.0.
    """
    t, n = route_result.probs.shape
    if n != n_experts:
        raise DimensionError(f"route has {n} experts, expected {n_experts}")
    counts = np.bincount(route_result.topk_idx.ravel(), minlength=n_experts)
    f = counts / route_result.topk_idx.size
    p = route_result.probs.mean(axis=0)
    return float(n_experts * np.sum(f * p))


def load_balance_loss_backward(route_result: RouteResult, n_experts: int) -> np.ndarray:
    """d(load balance)/d(probs): constant per column, N * f_i / T."""
    t, n = route_result.probs.shape
    counts = np.bincount(route_result.topk_idx.ravel(), minlength=n_experts)
    f = counts / route_result.topk_idx.size
    return np.broadcast_to(n_experts * f / t, (t, n)).copy()


def z_loss(logits: np.ndarray) -> float:
    """Mean squared log-partition: (1/T) * sum_t logsumexp(z_t)^2."""
    lse = logsumexp_rows(logits)
    return float(np.mean(lse**2))


def z_loss_backward(logits: np.ndarray) -> np.ndarray:
    t = logits.shape[0]
    lse = logsumexp_rows(logits)
    return (2.0 / t) * lse[:, None] * softmax_rows(logits)
