"""Reasoning-enhanced decoder: learnable queries -> SSM block -> MoE ->
cross-attention over encoder features -> second cross-attention against
self-attended encoder features -> per-slot output features and heads.

Slot convention: slot 0 of the query bank is the ego slot, the remaining
slots are agent slots. Bounding-box features are read from the
intermediate activation (after the first cross-attention); velocity,
action and trajectory features from the final one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import Attention
from .autodiff import Tensor
from .core import COMMANDS, N_WAYPOINTS, Trajectory, wrap_angle
from .moe import MoeLayer, moe_forward
from .ssm import SsmBlock


class QueryBank(ad.Module):
    """Learnable decoder queries: one ego slot plus n agent slots."""

    def __init__(self, rng: np.random.Generator, n_agent_slots: int, dim: int):
        self.n_agent_slots = n_agent_slots
        self.dim = dim
        self.queries = ad.init_normal(rng, (n_agent_slots + 1, dim))

    @property
    def n_queries(self) -> int:
        return self.n_agent_slots + 1


@dataclass
class RedLayerOutput:
    """Per-layer activations plus the slot-indexed feature readers."""

    intermediate: Tensor  # (n_queries, D), post first cross-attention
    final: Tensor  # (n_queries, D), post second cross-attention

    def ego_final(self) -> Tensor:
        return ad.gather(self.final, [0])

    def agent_final(self) -> Tensor:
        n = self.final.shape[0]
        return ad.gather(self.final, list(range(1, n)))

    def agent_intermediate(self) -> Tensor:
        n = self.intermediate.shape[0]
        return ad.gather(self.intermediate, list(range(1, n)))

    # feature aliases used by the heads and the interaction stage
    def bbox_feature(self) -> Tensor:
        return self.agent_intermediate()

    def velocity_feature(self) -> Tensor:
        return self.agent_final()

    def action_feature(self) -> Tensor:
        return self.ego_final()

    def trajectory_feature(self) -> Tensor:
        return self.ego_final()


class RedLayer(ad.Module):
    """One decoder layer; each stage is wrapped residual + layer norm."""

    def __init__(self, rng: np.random.Generator, dim: int, state_dim: int = 8,
                 n_experts: int = 3, k: int = 2, moe_hidden: Optional[int] = None,
                 n_heads: int = 2, p_drop: float = 0.1,
                 use_mamba: bool = True, use_moe: bool = True):
        self.use_mamba = use_mamba
        self.use_moe = use_moe
        self.mamba = SsmBlock(rng, dim, state_dim=state_dim) if use_mamba else None
        self.moe = MoeLayer(rng, dim, n_experts=n_experts, hidden=moe_hidden,
                            k=k, p_drop=p_drop) if use_moe else None
        self.norm_moe = ad.LayerNorm(dim) if use_moe else None
        self.cross1 = Attention(rng, dim, n_heads)
        self.norm1 = ad.LayerNorm(dim)
        self.enc_self = Attention(rng, dim, n_heads)
        self.norm_enc = ad.LayerNorm(dim)
        self.cross2 = Attention(rng, dim, n_heads)
        self.norm2 = ad.LayerNorm(dim)

    def __call__(self, q_in: Tensor, enc: Tensor, training: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 frozen_decisions: Optional[list] = None) -> tuple[RedLayerOutput, list]:
        decisions: list = []
        h = self.mamba(q_in) if self.use_mamba else q_in
        if self.use_moe:
            moe_out, decisions = moe_forward(h, self.moe, training=training, rng=rng,
                                             frozen_decisions=frozen_decisions)
            h = self.norm_moe(ad.add(h, moe_out))
        intermediate = self.norm1(ad.add(h, self.cross1(h, enc, enc)))
        enc_refined = self.norm_enc(ad.add(enc, self.enc_self(enc, enc, enc)))
        final = self.norm2(ad.add(intermediate,
                                  self.cross2(intermediate, enc_refined, enc_refined)))
        return RedLayerOutput(intermediate=intermediate, final=final), decisions


def decode(queries: QueryBank, enc: Tensor, layers: list,
           training: bool = False,
           rng: Optional[np.random.Generator] = None,
           frozen: Optional[list] = None) -> tuple[RedLayerOutput, list]:
    """Chain decoder layers, each consuming the previous layer's final
    activation; only the last layer's output feeds the heads.

    frozen, when given, carries one gate-decision list per layer so the
    routing of an earlier evaluation is replayed (gradient checks)."""
    if not layers:
        raise ValueError("decode: need at least one layer")
    q = queries.queries
    out = None
    per_layer: list = []
    for i, layer in enumerate(layers):
        out, decisions = layer(q, enc, training=training, rng=rng,
                               frozen_decisions=frozen[i] if frozen else None)
        per_layer.append(decisions)
        q = out.final
    return out, per_layer


class Heads(ad.Module):
    """Output heads: trajectory offsets on a selected anchor, agent boxes,
    agent velocities, and the 3-way action logits (unknown excluded)."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.dim = dim
        self.action = ad.Linear(rng, dim, len(COMMANDS))
        self.bbox = ad.Linear(rng, dim, 6)  # cx, cy, length, width, heading, existence
        self.velocity = ad.Linear(rng, dim, 2)
        self.anchor_embed = ad.Linear(rng, 3 * N_WAYPOINTS, dim)
        self.score_query = ad.Linear(rng, dim, dim, bias=False)
        self.offset_in = ad.Linear(rng, 2 * dim, 2 * dim)
        self.offset_out = ad.Linear(rng, 2 * dim, 3 * N_WAYPOINTS)

    def action_logits(self, action_feature: Tensor) -> Tensor:
        return ad.reshape(self.action(action_feature), (len(COMMANDS),))

    def anchor_scores(self, trajectory_feature: Tensor, anchors: list) -> np.ndarray:
        """Bilinear scorer on plain arrays; anchor choice is a hard argmax,
        so no graph is built here."""
        flat = np.stack([a.points.reshape(-1) for a in anchors])
        emb = flat @ self.anchor_embed.w.data + self.anchor_embed.b.data
        q = trajectory_feature.data @ self.score_query.w.data  # (1, D)
        return (emb @ q[0]) / np.sqrt(self.dim)

    def trajectory(self, refined_feature: Tensor, anchor: Trajectory) -> Tensor:
        """Anchor plus regressed per-waypoint offsets, conditioned on the
        anchor's own embedding so the residual is learnable per anchor."""
        anchor_flat = Tensor(anchor.points.reshape(1, -1))
        emb = self.anchor_embed(anchor_flat)
        joint = ad.concat([refined_feature, emb], axis=1)
        offsets = self.offset_out(ad.silu(self.offset_in(joint)))
        return ad.add(Tensor(anchor.points), ad.reshape(offsets, (N_WAYPOINTS, 3)))

    def agent_boxes(self, bbox_feature: Tensor) -> Tensor:
        return self.bbox(bbox_feature)

    def agent_velocities(self, velocity_feature: Tensor) -> Tensor:
        return self.velocity(velocity_feature)


def trajectory_from_tensor(traj: Tensor) -> Trajectory:
    """Wrap headings to (-pi, pi] and freeze to a plain trajectory record."""
    pts = traj.data.copy()
    pts[:, 2] = wrap_angle(pts[:, 2])
    return Trajectory(pts)
