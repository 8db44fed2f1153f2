"""Training losses: trajectory/box regression stand-in, velocity L1,
action cross-entropy, and the weighted composite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import COMMANDS, Trajectory

MATCH_THRESHOLD_M = 2.0


@dataclass
class LossWeights:
    lambda_v: float = 1.0
    lambda_a: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.lambda_v) and np.isfinite(self.lambda_a)):
            raise ValueError("loss weights must be finite")
        if self.lambda_v < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be non-negative")


def greedy_match(pred_centers: np.ndarray, gt_centers: np.ndarray,
                 threshold: float = MATCH_THRESHOLD_M) -> list:
    """Greedy nearest-center assignment within a distance threshold.

    Pairs are taken in ascending distance order (ties by slot then agent
    index); every slot and agent is used at most once.
    """
    pred_centers = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 2)
    gt_centers = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 2)
    pairs = []
    for s in range(pred_centers.shape[0]):
        for g in range(gt_centers.shape[0]):
            d = float(np.hypot(*(pred_centers[s] - gt_centers[g])))
            if d <= threshold:
                pairs.append((d, s, g))
    pairs.sort()
    used_s: set = set()
    used_g: set = set()
    out = []
    for d, s, g in pairs:
        if s in used_s or g in used_g:
            continue
        used_s.add(s)
        used_g.add(g)
        out.append((s, g))
    return out


def velocity_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean absolute error over matched agents' (vx, vy); zero when empty."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape[0] != gt.shape[0]:
        raise ValueError(f"velocity_loss: {pred.shape[0]} predictions vs {gt.shape[0]} targets")
    if gt.shape[0] == 0:
        return Tensor(0.0)
    return ad.mean_(ad.abs_(ad.sub(pred, Tensor(gt))))


def action_loss(logits: Tensor, command: str) -> Tensor:
    """Cross-entropy of the 3-way action logits against the driving command.

    Scenarios carrying the unknown command are filtered out before this
    loss is ever formed.
    """
    if command not in COMMANDS:
        raise ValueError(f"action_loss: command {command!r} outside {COMMANDS}")
    idx = COMMANDS.index(command)
    shift = float(logits.data.max())  # constant shift keeps exp() tame
    shifted = ad.sub(logits, Tensor(shift))
    lse = ad.log(ad.sum_(ad.exp(shifted)))
    picked = ad.gather(ad.reshape(shifted, (len(COMMANDS), 1)), [idx])
    return ad.reshape(ad.sub(lse, picked), ())


@dataclass
class PlanningLossParts:
    total: Tensor
    position: float
    heading: float
    bbox: float
    existence: float
    matches: list = field(default_factory=list)  # (slot, agent) pairs


def planning_loss(pred_traj: Tensor, gt_traj: Trajectory, pred_boxes: Tensor,
                  gt_agents: Sequence) -> PlanningLossParts:
    """Stand-in composite: waypoint L1 + cosine heading + box L1 + existence BCE.

    Position term is the mean |dx|,|dy| over 8x2 components; heading term
    is mean 0.5*(1 - cos(dtheta)); boxes match greedily by center distance
    within 2 m, matched slots target existence 1, unmatched 0.
    """
    xy, th = ad.split(pred_traj, [2, 1], axis=1)
    pos = ad.mean_(ad.abs_(ad.sub(xy, Tensor(gt_traj.xy))))
    dth = ad.sub(th, Tensor(gt_traj.headings.reshape(-1, 1)))
    heading = ad.mean_(ad.mul(Tensor(0.5), ad.sub(Tensor(1.0), ad.cos(dth))))

    n_slots = pred_boxes.shape[0]
    gt_centers = np.array([a.center for a in gt_agents]).reshape(-1, 2)
    matches = greedy_match(pred_boxes.data[:, :2], gt_centers)

    reg, logit = ad.split(pred_boxes, [5, 1], axis=1)
    targets = np.zeros((n_slots, 1))
    for s, _ in matches:
        targets[s, 0] = 1.0
    t = Tensor(targets)
    existence = ad.mean_(ad.sub(ad.softplus(logit), ad.mul(t, logit)))

    total = ad.add(ad.add(pos, heading), existence)
    bbox_val = 0.0
    if matches:
        slot_ids = [s for s, _ in matches]
        gt_rows = np.stack([
            np.concatenate([gt_agents[g].center, gt_agents[g].extent, [gt_agents[g].heading]])
            for _, g in matches])
        bbox = ad.mean_(ad.abs_(ad.sub(ad.gather(reg, slot_ids), Tensor(gt_rows))))
        total = ad.add(total, bbox)
        bbox_val = bbox.item()

    return PlanningLossParts(
        total=total, position=pos.item(), heading=heading.item(),
        bbox=bbox_val, existence=existence.item(), matches=matches)


def total_loss(dd: Tensor, vel: Tensor, act: Tensor, w: LossWeights) -> Tensor:
    """L = L_dd + lambda_v * L_vel + lambda_a * L_act, exactly."""
    for name, part in (("dd", dd), ("vel", vel), ("act", act)):
        if not np.isfinite(part.data).all():
            raise FloatingPointError(f"total_loss: non-finite {name} part")
    out = dd
    if w.lambda_v != 0.0:
        out = ad.add(out, ad.mul(Tensor(w.lambda_v), vel))
    if w.lambda_a != 0.0:
        out = ad.add(out, ad.mul(Tensor(w.lambda_a), act))
    return out
