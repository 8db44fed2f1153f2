"""Optimization loop: decoupled-weight-decay adaptive-moment updates,
seeded shuffling, gradient clipping, NaN abort with last-good checkpoint.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .core import COMMANDS
from .losses import LossWeights, action_loss, planning_loss, total_loss, velocity_loss
from .model import ModelInput, Planner, features_from_scenario


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_v: float = 1.0
    lambda_a: float = 0.5
    clip_norm: float = 5.0  # 0 disables clipping
    val_every: int = 0  # 0 disables periodic validation

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.weight_decay < 0 or self.clip_norm < 0:
            raise ValueError("weight_decay and clip_norm must be non-negative")


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Per step, for each parameter with a gradient:
        m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
        p <- p (1 - lr wd) - lr * mhat / (sqrt(vhat) + eps)
    Parameters that received no gradient this step are left untouched
    (no decay either).
    """

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float,
                 weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_global_norm(params: Sequence[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    sq = 0.0
    for _, p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    parts: dict
    val_pdms: Optional[float]
    wall_time: float


class TrainingAborted(RuntimeError):
    pass


def scenario_loss(model: Planner, scenario, inp: ModelInput, weights: LossWeights,
                  training: bool, rng: Optional[np.random.Generator]):
    """Forward one scenario and assemble its composite loss."""
    out = model.forward(inp, training=training, rng=rng)
    parts = planning_loss(out.traj, scenario.expert, out.boxes, scenario.agents)

    if parts.matches:
        slot_ids = [s for s, _ in parts.matches]
        pred_v = ad.gather(out.velocities, slot_ids)
        gt_v = np.stack([scenario.agents[g].velocity for _, g in parts.matches])
        vel = velocity_loss(pred_v, gt_v)
    else:
        vel = Tensor(0.0)

    if scenario.command in COMMANDS:
        act = action_loss(out.action_logits, scenario.command)
    else:
        act = Tensor(0.0)  # unknown command filtered from this loss

    loss = total_loss(parts.total, vel, act, weights)
    detail = {"dd": parts.total.item(), "vel": vel.item(), "act": act.item(),
              "position": parts.position, "heading": parts.heading,
              "bbox": parts.bbox, "existence": parts.existence}
    return loss, detail


def train(model: Planner, scenarios: Sequence, config: TrainConfig,
          out_dir, val_fn: Optional[Callable[[Planner], float]] = None,
          log_name: str = "metrics.jsonl") -> list:
    """Seeded mini-batch training; returns the per-epoch records.

    Writes `checkpoint.bin` after every epoch and aborts (keeping the last
    good checkpoint) if a loss goes non-finite.
    """
    if not scenarios:
        raise ValueError("train: empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / log_name
    ckpt_path = out_dir / "checkpoint.bin"

    named = list(model.named_parameters())
    opt = AdamW(named, lr=config.lr, weight_decay=config.weight_decay,
                beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    weights = LossWeights(lambda_v=config.lambda_v, lambda_a=config.lambda_a)
    drop_rng = np.random.default_rng(config.seed + 17)

    features = [features_from_scenario(s, model.config) for s in scenarios]
    records: list[EpochRecord] = []
    start = time.monotonic()

    with open(log_path, "a") as log:
        for epoch in range(config.epochs):
            order = np.random.default_rng(
                config.seed * 1_000_003 + epoch).permutation(len(scenarios))
            epoch_losses = []
            part_sums: dict[str, float] = {}
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo:lo + config.batch_size]
                model.zero_grad()
                batch_terms = []
                for idx in batch:
                    loss, detail = scenario_loss(
                        model, scenarios[idx], features[idx], weights,
                        training=True, rng=drop_rng)
                    batch_terms.append(loss)
                    for k2, v2 in detail.items():
                        part_sums[k2] = part_sums.get(k2, 0.0) + v2
                batch_loss = ad.mean_(ad.concat(
                    [ad.reshape(t, (1,)) for t in batch_terms], axis=0))
                value = batch_loss.item()
                if not np.isfinite(value):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch}; last good checkpoint kept "
                        f"at {ckpt_path}")
                ad.backward(batch_loss)
                clip_global_norm(named, config.clip_norm)
                opt.step()
                epoch_losses.append(value)

            val = val_fn(model) if val_fn and config.val_every \
                and (epoch + 1) % config.val_every == 0 else None
            rec = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)),
                parts={k2: v2 / len(scenarios) for k2, v2 in sorted(part_sums.items())},
                val_pdms=val,
                wall_time=round(time.monotonic() - start, 3),
            )
            records.append(rec)
            log.write(json.dumps({
                "epoch": rec.epoch, "train_loss": rec.train_loss, "parts": rec.parts,
                "val_pdms": rec.val_pdms, "wall_time": rec.wall_time}) + "\n")
            log.flush()
            save_checkpoint(ckpt_path,
                            ((n, t.data) for n, t in model.named_parameters()),
                            model.config.config_hash())
    return records
