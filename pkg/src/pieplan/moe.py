"""Top-K mixture-of-experts layer with secondary-output dropout and
capacity-overflow redistribution.

Routing decisions (which experts, what got dropped, where overflow went)
are made on plain arrays and recorded as GateDecision traces; the final
per-token weights are then rebuilt inside the differentiation graph so
gradients flow through the softmax of the surviving logits while the
selection itself stays frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_P_DROP = 0.1


@dataclass
class GateDecision:
    """Routing trace for one token."""

    token: int
    ranked: list  # selected expert ids, best logit first (tie: lower index)
    weights: dict  # final weight per surviving expert id
    dropped: list = field(default_factory=list)  # (expert, weight removed by dropout)
    redistributed: list = field(default_factory=list)  # (from_expert, to_expert, mass)
    evicted: list = field(default_factory=list)  # capacity evictions settled by renorm

    def surviving(self) -> list:
        gone = {e for e, _ in self.dropped} | {f for f, _, _ in self.redistributed} \
            | set(self.evicted)
        return [e for e in self.ranked if e not in gone]

    def weight_sum(self) -> float:
        return float(sum(self.weights.values()))


def top_k_mask(v: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest entries, set the rest to -inf. Ties resolve to the
    lower index."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"top_k_mask: k={k} out of range for {n} experts")
    order = np.argsort(-v, kind="stable")  # stable: equal values keep index order
    out = np.full(n, -np.inf)
    keep = order[:k]
    out[keep] = v[keep]
    return out


def _softmax_np(v: np.ndarray) -> np.ndarray:
    m = v.max()
    if not np.isfinite(m):
        m = 0.0
    e = np.exp(v - m)
    return e / e.sum()


def gate(x: np.ndarray, w_gate: np.ndarray, k: int, training: bool,
         rng: Optional[np.random.Generator] = None,
         p_drop: float = DEFAULT_P_DROP, token: int = 0) -> GateDecision:
    """Route one token: logits = x . W_g, Top-K mask, softmax over survivors.

    In training mode every selected non-argmax expert (a "secondary output")
    is dropped with probability p_drop and the rest renormalize to sum 1.
    The argmax expert is never dropped, so at least one expert survives.
    """
    x = np.asarray(x, dtype=np.float64)
    w_gate = np.asarray(w_gate, dtype=np.float64)
    logits = x @ w_gate
    masked = top_k_mask(logits, k)
    ranked = [int(i) for i in np.argsort(-logits, kind="stable")[:k]]
    w = _softmax_np(masked)
    decision = GateDecision(token=token, ranked=ranked,
                            weights={e: float(w[e]) for e in ranked})
    if training:
        if rng is None:
            raise ValueError("gate: training mode needs an explicit rng")
        kept = [ranked[0]]
        for e in ranked[1:]:
            if rng.random() < p_drop:
                decision.dropped.append((e, decision.weights.pop(e)))
            else:
                kept.append(e)
        total = sum(decision.weights.values())
        for e in kept:
            decision.weights[e] = decision.weights[e] / total
    return decision


def default_capacity(batch_tokens: int, n_experts: int) -> int:
    return int(math.ceil(1.25 * batch_tokens / n_experts))


def apply_capacity(decisions: Sequence[GateDecision], capacity: int) -> list:
    """Enforce a per-expert token budget, tokens admitted in batch order.

    An over-budget (token, expert) claim sheds its weight to the token's
    next-ranked admitted expert with room; failing that, the token's other
    admitted weights renormalize; a token whose only expert overflows keeps
    it (a token is never left unserved), which is the one documented way an
    expert may exceed capacity. Per-token weight always sums to 1.
    """
    if capacity < 1:
        raise ValueError(f"apply_capacity: capacity must be >= 1, got {capacity}")
    load: dict[int, int] = {}
    admitted: dict[tuple[int, int], bool] = {}
    for d in decisions:
        for e in d.ranked:
            if e not in d.weights:
                continue  # removed by dropout
            if load.get(e, 0) < capacity:
                load[e] = load.get(e, 0) + 1
                admitted[(d.token, e)] = True
            else:
                admitted[(d.token, e)] = False

    for d in decisions:
        overflowed = [e for e in d.ranked if e in d.weights and not admitted[(d.token, e)]]
        for e in overflowed:
            mass = d.weights[e]
            # a transfer target already processes this token, so moving mass
            # there never raises any expert's token count
            target = next((e2 for e2 in d.ranked[d.ranked.index(e) + 1:]
                           if e2 in d.weights and admitted[(d.token, e2)]), None)
            others = [e2 for e2 in d.ranked
                      if e2 != e and e2 in d.weights and admitted[(d.token, e2)]]
            if target is not None:
                d.weights[target] = d.weights[target] + mass
                del d.weights[e]
                d.redistributed.append((e, target, mass))
            elif others:
                del d.weights[e]
                total = sum(d.weights.values())
                for e2 in list(d.weights):
                    d.weights[e2] = d.weights[e2] / total
                d.evicted.append(e)
            else:
                # sole surviving expert: keep the token over budget
                load[e] = load.get(e, 0) + 1
                admitted[(d.token, e)] = True
    return list(decisions)


class MoeLayer(ad.Module):
    """Bank of two-layer SiLU feed-forward experts plus a linear gate.

    Input and output dimensions are equal so the layer slots into a
    residual stream. hidden defaults to 4x the model dim at desk scale
    (full-scale configs may set it to 768 or anything else).
    """

    def __init__(self, rng: np.random.Generator, dim: int, n_experts: int = 3,
                 hidden: Optional[int] = None, k: int = 2,
                 p_drop: float = DEFAULT_P_DROP):
        if not 1 <= k <= n_experts:
            raise ValueError(f"MoeLayer: k={k} out of range for {n_experts} experts")
        self.dim = dim
        self.n_experts = n_experts
        self.hidden = hidden if hidden is not None else 4 * dim
        self.k = k
        self.p_drop = p_drop
        self.w_gate = ad.init_uniform(rng, dim, (dim, n_experts))
        self.experts_in = [ad.Linear(rng, dim, self.hidden) for _ in range(n_experts)]
        self.experts_out = [ad.Linear(rng, self.hidden, dim) for _ in range(n_experts)]

    def expert(self, i: int, x: Tensor) -> Tensor:
        return self.experts_out[i](ad.silu(self.experts_in[i](x)))


def _token_weight_rows(logits: Tensor, decisions: Sequence[GateDecision],
                       n_experts: int) -> Tensor:
    """Rebuild final gate weights (L, n) inside the graph from frozen decisions."""
    L = logits.shape[0]
    mask_add = np.full((L, n_experts), -np.inf)
    for d in decisions:
        for e in d.ranked:
            mask_add[d.token, e] = 0.0
    w = ad.softmax(ad.add(logits, Tensor(mask_add)), axis=1)

    rows = []
    for t, d in enumerate(decisions):
        if d.token != t:
            raise ValueError("decisions must be ordered by token index")
        row = ad.gather(w, [d.token])  # (1, n)
        if d.dropped:
            keep = np.ones((1, n_experts))
            for e, _ in d.dropped:
                keep[0, e] = 0.0
            row = ad.mul(row, Tensor(keep))
            row = ad.div(row, ad.sum_(row, axis=1, keepdims=True))
        if d.redistributed:
            route = np.eye(n_experts)
            for f, t, _ in d.redistributed:
                route[f, f] = 0.0
                route[f, t] = 1.0
            row = ad.matmul(row, Tensor(route))
        if d.evicted:
            keep = np.ones((1, n_experts))
            for e in d.evicted:
                keep[0, e] = 0.0
            row = ad.mul(row, Tensor(keep))
            row = ad.div(row, ad.sum_(row, axis=1, keepdims=True))
        rows.append(row)
    return ad.concat(rows, axis=0)


def moe_forward(x: Tensor, layer: MoeLayer, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                capacity: Optional[int] = None,
                frozen_decisions: Optional[list] = None) -> tuple[Tensor, list]:
    """y[token] = sum over surviving experts of weight * E_i(x[token]).

    Returns (output, gate decisions). Pass frozen_decisions to re-evaluate
    with an earlier routing (used by gradient checks).
    """
    L, D = x.shape
    if D != layer.dim:
        raise ValueError(f"moe_forward: feature dim {D} != layer dim {layer.dim}")
    logits = ad.matmul(x, layer.w_gate)

    if frozen_decisions is None:
        decisions = [gate(x.data[t], layer.w_gate.data, layer.k, training,
                          rng=rng, p_drop=layer.p_drop, token=t) for t in range(L)]
        cap = capacity if capacity is not None else default_capacity(L, layer.n_experts)
        decisions = apply_capacity(decisions, cap)
    else:
        decisions = frozen_decisions

    w = _token_weight_rows(logits, decisions, layer.n_experts)
    w_cols = ad.split(w, [1] * layer.n_experts, axis=1)  # each (L, 1)

    contributions = []
    for e in range(layer.n_experts):
        ids = [d.token for d in decisions if e in d.weights]
        if not ids:
            continue
        xe = ad.gather(x, ids)
        he = layer.expert(e, xe)
        we = ad.gather(w_cols[e], ids)  # (m, 1)
        contributions.append(ad.scatter_add(ad.mul(he, we), ids, L))
    if contributions:
        y = contributions[0]
        for c in contributions[1:]:
            y = ad.add(y, c)
    else:
        y = ad.mul(x, Tensor(0.0))

    if frozen_decisions is None:
        dense = w.data
        for d in decisions:
            d.weights = {e: float(dense[d.token, e]) for e in d.weights}
    return y, decisions
