"""Full planner: grid embedding, bidirectional fusion, reasoning decoder,
anchor selection, action-motion interaction, and output heads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .anchors import AnchorBank, select_anchor, select_anchor_class
from .autodiff import Tensor
from .core import ALL_COMMANDS, COMMANDS, EgoState, Trajectory
from .fusion import FusionBranch, Modality, ModalityGrid, unidirectional_variant
from .interaction import ActionMotionInteraction
from .red import Heads, QueryBank, RedLayer, decode, trajectory_from_tensor

FUSION_MODES = ("+-", "++", "none")
INTERACTION_MODES = ("shared", "unshared", "off")


@dataclass
class ModelConfig:
    dim: int = 32
    state_dim: int = 8
    n_heads: int = 2
    fusion_layers: int = 2
    red_layers: int = 2
    n_experts: int = 3
    moe_k: int = 2
    moe_hidden: int = 0  # 0 -> 4 * dim
    p_drop: float = 0.1
    n_agent_slots: int = 8
    image_tokens: tuple = (4, 16)
    lidar_tokens: tuple = (8, 8)
    raw_channels: int = 4
    fusion: str = "+-"
    interaction: str = "shared"
    red_mamba: bool = True
    red_moe: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.interaction not in INTERACTION_MODES:
            raise ValueError(
                f"interaction must be one of {INTERACTION_MODES}, got {self.interaction!r}")
        self.image_tokens = tuple(self.image_tokens)
        self.lidar_tokens = tuple(self.lidar_tokens)

    def config_hash(self) -> str:
        doc = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class ModelInput:
    """Token-level features for one scene (pooled raw grids plus ego status)."""

    image_tokens: np.ndarray  # (hi, wi, C)
    lidar_tokens: np.ndarray  # (hl, wl, C)
    ego_status: np.ndarray  # (speed, accel, onehot command over 4)
    scenario_id: str = ""


def _pool(grid: np.ndarray, target: tuple) -> np.ndarray:
    h, w, c = grid.shape
    th, tw = target
    if h % th or w % tw:
        raise ValueError(f"raw grid {h}x{w} not divisible into {th}x{tw} tokens")
    return grid.reshape(th, h // th, tw, w // tw, c).mean(axis=(1, 3))


def features_from_scenario(scenario, config: ModelConfig) -> ModelInput:
    """Pool the scenario's raw grids to the model's token resolution and
    pack ego status (speed, acceleration, one-hot driving command)."""
    onehot = np.zeros(len(ALL_COMMANDS))
    onehot[ALL_COMMANDS.index(scenario.command)] = 1.0
    status = np.concatenate([[scenario.ego.speed, scenario.ego.accel], onehot])
    return ModelInput(
        image_tokens=_pool(np.asarray(scenario.image_grid, dtype=np.float64),
                           config.image_tokens),
        lidar_tokens=_pool(np.asarray(scenario.lidar_grid, dtype=np.float64),
                           config.lidar_tokens),
        ego_status=status,
        scenario_id=scenario.id,
    )


@dataclass
class FrozenChoices:
    """Discrete routing replayed across evaluations: per-layer gate
    decisions plus the selected anchor."""

    gate: list
    anchor_class: str
    anchor_index: int


@dataclass
class PlannerOutput:
    traj: Tensor  # (8, 3), headings unwrapped inside the graph
    action_logits: Tensor  # (3,)
    boxes: Tensor  # (n_agent_slots, 6)
    velocities: Tensor  # (n_agent_slots, 2)
    anchor_class: str
    anchor_index: int
    anchor: Trajectory
    layer_decisions: list = field(default_factory=list)  # per RED layer

    @property
    def gate_decisions(self) -> list:
        return [d for layer in self.layer_decisions for d in layer]

    def frozen_choices(self) -> FrozenChoices:
        return FrozenChoices(gate=self.layer_decisions,
                             anchor_class=self.anchor_class,
                             anchor_index=self.anchor_index)

    def trajectory(self) -> Trajectory:
        return trajectory_from_tensor(self.traj)

    def reported_agents(self) -> list:
        """Boxes whose existence logit clears the 0.5 probability threshold."""
        out = []
        for row in self.boxes.data:
            if 1.0 / (1.0 + np.exp(-row[5])) >= 0.5:
                out.append(row[:5].copy())
        return out


class Planner(ad.Module):
    def __init__(self, config: ModelConfig, anchor_bank: Optional[AnchorBank] = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        hidden = c.moe_hidden if c.moe_hidden else 4 * c.dim

        self.img_embed = ad.Linear(rng, c.raw_channels, c.dim)
        self.lid_embed = ad.Linear(rng, c.raw_channels, c.dim)
        self.ego_embed = ad.Linear(rng, 2 + len(ALL_COMMANDS), c.dim)
        identity = c.fusion == "none"
        self.branch_a = FusionBranch(rng, c.dim, n_layers=c.fusion_layers,
                                     state_dim=c.state_dim, identity=identity)
        self.branch_b = FusionBranch(rng, c.dim, n_layers=c.fusion_layers,
                                     state_dim=c.state_dim, identity=identity)
        self.queries = QueryBank(rng, c.n_agent_slots, c.dim)
        self.red_layers = [
            RedLayer(rng, c.dim, state_dim=c.state_dim, n_experts=c.n_experts,
                     k=c.moe_k, moe_hidden=hidden, n_heads=c.n_heads,
                     p_drop=c.p_drop, use_mamba=c.red_mamba, use_moe=c.red_moe)
            for _ in range(c.red_layers)
        ]
        self.interaction = None if c.interaction == "off" else ActionMotionInteraction(
            rng, c.dim, n_heads=c.n_heads, shared=c.interaction == "shared")
        self.heads = Heads(rng, c.dim)
        self.anchor_bank = anchor_bank  # constants, not parameters

    def set_anchor_bank(self, bank: AnchorBank) -> None:
        self.anchor_bank = bank

    def encode(self, inp: ModelInput) -> Tensor:
        """Embed grids, fuse, flatten both modality segments, append the
        ego-status token."""
        c = self.config

        def embed(grid: np.ndarray, linear: ad.Linear) -> Tensor:
            h, w, ch = grid.shape
            tokens = linear(Tensor(grid.reshape(h * w, ch)))
            return ad.reshape(tokens, (h, w, c.dim))

        img = ModalityGrid(Modality.IMAGE, embed(inp.image_tokens, self.img_embed))
        lid = ModalityGrid(Modality.LIDAR, embed(inp.lidar_tokens, self.lid_embed))
        if c.fusion == "none":
            fused_img, fused_lid = img, lid
        else:
            fused = unidirectional_variant(img, lid, self.branch_a, self.branch_b, c.fusion)
            fused_img, fused_lid = fused.image_out, fused.lidar_out
        ego_token = self.ego_embed(Tensor(inp.ego_status.reshape(1, -1)))
        return ad.concat([fused_img.tokens(), fused_lid.tokens(), ego_token], axis=0)

    def forward(self, inp: ModelInput, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                frozen: Optional[FrozenChoices] = None) -> PlannerOutput:
        if self.anchor_bank is None:
            raise RuntimeError("planner needs an anchor bank before forward()")
        enc = self.encode(inp)
        out, layer_decisions = decode(self.queries, enc, self.red_layers,
                                      training=training, rng=rng,
                                      frozen=frozen.gate if frozen else None)

        action_logits = self.heads.action_logits(out.action_feature())
        if frozen is not None:
            anchor_class = frozen.anchor_class
            anchor_index = frozen.anchor_index
            anchor = self.anchor_bank.anchors(anchor_class)[anchor_index]
        else:
            anchor_class = select_anchor_class(action_logits.data)
            anchors = self.anchor_bank.anchors(anchor_class)
            scores = self.heads.anchor_scores(out.trajectory_feature(), anchors)
            anchor_index, anchor = select_anchor(anchors, scores)

        traj_feature = out.trajectory_feature()
        if self.interaction is not None:
            traj_feature = self.interaction(traj_feature, out.action_feature(),
                                            out.velocity_feature())
        traj = self.heads.trajectory(traj_feature, anchor)
        boxes = self.heads.agent_boxes(out.bbox_feature())
        velocities = self.heads.agent_velocities(out.velocity_feature())
        return PlannerOutput(
            traj=traj, action_logits=action_logits, boxes=boxes,
            velocities=velocities, anchor_class=anchor_class,
            anchor_index=anchor_index, anchor=anchor,
            layer_decisions=layer_decisions if frozen is None else frozen.gate)

    def __call__(self, inp: ModelInput, **kw) -> PlannerOutput:
        return self.forward(inp, **kw)

    def plan(self, inp: ModelInput) -> Trajectory:
        """Inference helper: no graph, wrapped headings."""
        with ad.no_grad():
            return self.forward(inp).trajectory()
