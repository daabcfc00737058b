"""Routing-geometry analysis: key-vector atlases, redundancy, routing stats.

The atlas view treats each column of an expert's input projection as a "key
vector" living in model space, and each router column as an "expert vector".
Projecting everything into the PCA plane of the backbone FFN keys shows where
adapters place their capacity relative to the backbone's.

The redundancy model estimates how many of the m*d_b adapter key vectors are
effectively distinct: with p0 the probability that two spherical directions
land within eps of each other in a d_b-dimensional bottleneck,

    p0  = chi2_cdf(d_b * eps^2 / 4, d_b)
    p_t = clamp(gamma_t * p0, 0, 1)
    eta = 1 - exp(-m * d_b * gamma_t * p0^2)
    expected_effective = m * d_b * eta

gamma_t is a free overlap-growth knob, not fitted here; a helper inverts the
formula when an observed effective count is available.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import LanguageModel
from .numerics import (
    ConfigError,
    DomainError,
    chi2_cdf,
    pca_fit_project,
)

KIND_FFN_KEY = "ffn_key"
KIND_EXPERT_VECTOR = "expert_vector"
KIND_PEFT_KEY = "peft_key"
KIND_PEFT_EXPERT_VECTOR = "peft_expert_vector"


@dataclass
class VectorAtlas:
    """Aligned arrays: vectors[i] is a d-vector with kind/owner/col labels."""

    layer: int
    vectors: np.ndarray  # (n_vectors, d)
    kinds: list[str]
    owners: list[int]
    cols: list[int]

    def subset(self, kind: str) -> np.ndarray:
        idx = [i for i, k in enumerate(self.kinds) if k == kind]
        return self.vectors[idx]


@dataclass
class ProjectedAtlas:
    layer: int
    coords: np.ndarray  # (n_vectors, dims)
    kinds: list[str]
    owners: list[int]
    cols: list[int]
    components: np.ndarray  # (dims, d)


def extract_atlas(model: LanguageModel, layer: int) -> VectorAtlas:
    """Collect key and expert vectors of one block, backbone and adapters.

    Order is deterministic: backbone FFN keys (expert id, then column),
    backbone expert vectors, adapter keys, adapter expert vectors.
    """
    if not (0 <= layer < len(model.blocks)):
        raise ConfigError(f"layer {layer} outside [0, {len(model.blocks)})")
    blk = model.blocks[layer]
    moe = blk.adapted.moe
    vecs = []
    kinds: list[str] = []
    owners: list[int] = []
    cols: list[int] = []

    def add(v, kind, owner, col):
        vecs.append(np.asarray(v, dtype=np.float64))
        kinds.append(kind)
        owners.append(owner)
        cols.append(col)

    for i, ex in enumerate(moe.experts):
        for c in range(ex.w_up.value.shape[1]):
            add(ex.w_up.value[:, c], KIND_FFN_KEY, i, c)
    for i in range(moe.router.n_experts):
        add(moe.router.w_g.value[:, i], KIND_EXPERT_VECTOR, i, 0)
    for j, ad in enumerate(blk.adapted.adapters):
        for c in range(ad.w_down.value.shape[1]):
            add(ad.w_down.value[:, c], KIND_PEFT_KEY, j, c)
    if blk.adapted.peft_mix is not None:
        wg = blk.adapted.peft_mix.router.w_g.value
        for j in range(wg.shape[1]):
            add(wg[:, j], KIND_PEFT_EXPERT_VECTOR, j, 0)
    return VectorAtlas(layer, np.stack(vecs), kinds, owners, cols)


def project_atlas(atlas: VectorAtlas, dims: int = 2) -> ProjectedAtlas:
    """PCA plane fitted on backbone FFN keys only; everything projected
    into it. The FFN keys' projected centroid sits at the origin."""
    train = atlas.subset(KIND_FFN_KEY)
    if train.shape[0] < 2:
        raise ConfigError("atlas has too few ffn_key vectors to fit a projection")
    components, _ = pca_fit_project(train, dims)
    center = train.mean(axis=0)
    coords = (atlas.vectors - center) @ components.T
    return ProjectedAtlas(atlas.layer, coords, atlas.kinds, atlas.owners, atlas.cols, components)


def effective_count(vectors: np.ndarray, eps: float) -> int:
    """Greedy distinct-vector count: scan rows in order, keep a vector iff it
    is farther than eps (l2) from every vector kept so far."""
    if eps < 0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    kept: list[np.ndarray] = []
    for v in np.asarray(vectors, dtype=np.float64):
        if not kept:
            kept.append(v)
            continue
        d = np.linalg.norm(np.stack(kept) - v, axis=1)
        if np.all(d > eps):
            kept.append(v)
    return len(kept)


@dataclass
class RedundancyModel:
    m: int
    d_b: int
    eps: float
    gamma_t: float

    def __post_init__(self):
        if self.m < 1 or self.d_b < 1:
            raise ConfigError(f"need m >= 1 and d_b >= 1, got m={self.m}, d_b={self.d_b}")
        if self.eps < 0:
            raise DomainError(f"eps must be >= 0, got {self.eps}")
        if self.gamma_t < 0:
            raise DomainError(f"gamma_t must be >= 0, got {self.gamma_t}")


@dataclass
class RedundancyEstimate:
    p0: float
    p_t: float
    eta: float
    expected_effective: float


def redundancy_estimate(rm: RedundancyModel) -> RedundancyEstimate:
    p0 = float(chi2_cdf(rm.d_b * rm.eps**2 / 4.0, rm.d_b))
    p_t = min(1.0, max(0.0, rm.gamma_t * p0))
    eta = -math.expm1(-rm.m * rm.d_b * rm.gamma_t * p0**2)
    return RedundancyEstimate(p0, p_t, eta, rm.m * rm.d_b * eta)


def gamma_for_effective(m: int, d_b: int, eps: float, observed: float) -> float:
    """Invert expected_effective for gamma_t given an observed count."""
    rm = RedundancyModel(m, d_b, eps, 0.0)
    p0 = float(chi2_cdf(d_b * eps**2 / 4.0, d_b))
    if p0 <= 0.0:
        raise DomainError("p0 is zero at this eps; gamma_t is unidentifiable")
    cap = m * d_b
    if not (0.0 <= observed < cap):
        raise DomainError(f"observed effective count must lie in [0, {cap})")
    return -math.log1p(-observed / cap) / (cap * p0**2)


@dataclass
class LayerRoutingStats:
    layer: int
    topk_counts: np.ndarray       # (N,) int, appearances in top-k
    dispatch_fraction: np.ndarray  # (N,) counts / (T*K), sums to 1
    mean_prob: np.ndarray          # (N,)
    coactivation: np.ndarray       # (N, N) int, joint top-k membership
    entropy: float                 # nats, of the dispatch fraction
    peft_topk_counts: Optional[np.ndarray] = None
    peft_dispatch_fraction: Optional[np.ndarray] = None
    peft_mean_prob: Optional[np.ndarray] = None


def _stats_from(route_result, n: int):
    t = route_result.probs.shape[0]
    onehot = np.zeros((t, n))
    np.put_along_axis(onehot, route_result.topk_idx, 1.0, axis=1)
    counts = onehot.sum(axis=0).astype(np.int64)
    frac = counts / route_result.topk_idx.size
    co = (onehot.T @ onehot).astype(np.int64)
    nz = frac[frac > 0]
    entropy = float(-np.sum(nz * np.log(nz)))
    return counts, frac, route_result.probs.mean(axis=0), co, entropy


def routing_stats(model: LanguageModel, tokens: np.ndarray) -> list[LayerRoutingStats]:
    """Run one eval forward and summarize routing per layer."""
    _, cache = model.forward(tokens, train=False)
    out = []
    for layer, info in enumerate(cache.infos):
        counts, frac, meanp, co, ent = _stats_from(info.backbone, model.cfg.n_experts)
        st = LayerRoutingStats(layer, counts, frac, meanp, co, ent)
        if info.peft is not None:
            m = info.peft.probs.shape[1]
            pc, pf, pm, _, _ = _stats_from(info.peft, m)
            st.peft_topk_counts = pc
            st.peft_dispatch_fraction = pf
            st.peft_mean_prob = pm
        out.append(st)
    return out


def write_atlas_csv(proj: ProjectedAtlas, path) -> None:
    """Columns: index, kind, owner, col, then x0..x{dims-1}."""
    dims = proj.coords.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "kind", "owner", "col"] + [f"x{i}" for i in range(dims)])
        for i in range(proj.coords.shape[0]):
            w.writerow(
                [i, proj.kinds[i], proj.owners[i], proj.cols[i]]
                + [f"{v:.12g}" for v in proj.coords[i]]
            )


def write_routing_csv(stats: list[LayerRoutingStats], path) -> None:
    """One row per (layer, expert): counts, fractions, mean probability."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "expert", "topk_count", "dispatch_fraction", "mean_prob"])
        for st in stats:
            for i in range(len(st.topk_counts)):
                w.writerow([
                    st.layer, i, int(st.topk_counts[i]),
                    f"{st.dispatch_fraction[i]:.12g}", f"{st.mean_prob[i]:.12g}",
                ])


_PALETTE_SAT = 62
_PALETTE_LIGHT = 42


def _color(owner: int, n_owners: int) -> str:
    hue = (owner * 360) // max(n_owners, 1)
    return f"hsl({hue},{_PALETTE_SAT}%,{_PALETTE_LIGHT}%)"


def write_atlas_svg(proj: ProjectedAtlas, path, size: int = 640) -> None:
    """Deterministic scatter of the first two projected dimensions.

    Backbone FFN keys are dots, expert vectors are crosses, adapter keys are
    rings, adapter expert vectors are x-crosses; hue encodes the owner.
    """
    if proj.coords.shape[1] < 2:
        raise ConfigError("svg scatter needs at least 2 projected dimensions")
    xy = proj.coords[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pad = 0.06 * span
    lo = lo - pad
    span = span + 2 * pad

    def sx(v):
        return (v - lo[0]) / span[0] * (size - 40) + 20

    def sy(v):
        return size - ((v - lo[1]) / span[1] * (size - 40) + 20)

    n_owners = max(proj.owners) + 1 if proj.owners else 1
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<text x="10" y="16" font-family="monospace" font-size="12">'
        f"layer {proj.layer} key-vector atlas</text>",
    ]
    for i in range(xy.shape[0]):
        x = f"{sx(xy[i, 0]):.2f}"
        y = f"{sy(xy[i, 1]):.2f}"
        c = _color(proj.owners[i], n_owners)
        kind = proj.kinds[i]
        if kind == KIND_FFN_KEY:
            lines.append(f'<circle cx="{x}" cy="{y}" r="2" fill="{c}" fill-opacity="0.55"/>')
        elif kind == KIND_EXPERT_VECTOR:
            lines.append(
                f'<path d="M {x} {y} m -5 0 h 10 m -5 -5 v 10" stroke="{c}" '
                f'stroke-width="2.2" fill="none"/>'
            )
        elif kind == KIND_PEFT_KEY:
            lines.append(
                f'<circle cx="{x}" cy="{y}" r="3.2" fill="none" stroke="{c}" stroke-width="1.6"/>'
            )
        else:  # peft expert vector
            lines.append(
                f'<path d="M {x} {y} m -4 -4 l 8 8 m 0 -8 l -8 8" stroke="{c}" '
                f'stroke-width="2.2" fill="none"/>'
            )
    legend = [
        (KIND_FFN_KEY, "backbone ffn key"),
        (KIND_EXPERT_VECTOR, "backbone expert vector"),
        (KIND_PEFT_KEY, "adapter key"),
        (KIND_PEFT_EXPERT_VECTOR, "adapter expert vector"),
    ]
    present = set(proj.kinds)
    y0 = 32
    for kind, label in legend:
        if kind in present:
            lines.append(
                f'<text x="10" y="{y0}" font-family="monospace" font-size="11">'
                f"{label}</text>"
            )
            y0 += 14
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
