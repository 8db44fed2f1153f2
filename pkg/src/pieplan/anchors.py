"""Trajectory anchor vocabulary: 20 clustered anchors per driving command.

Clustering is k-means over flattened (x, y) waypoint vectors with
k-means++ style seeded initialization and Lloyd iterations. Anchor
headings are recomputed from consecutive waypoint differences. The bank
is immutable once built and round-trips bit-exactly through its file
format.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import COMMANDS, N_WAYPOINTS, Trajectory

ANCHORS_PER_CLASS = 20
BANK_FORMAT_VERSION = 1


class AnchorBankError(Exception):
    pass


def kmeans(points: np.ndarray, k: int, seed: int,
           max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Seeded k-means++ initialization plus Lloyd iterations.

    Runs until the max centroid shift drops below tol or max_iter rounds.
    When there are fewer than k distinct points, distinct ones are used
    once and the remainder filled by cycling (the deduplication fallback).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"kmeans: {n} points for k={k}")
    rng = np.random.default_rng(seed)

    distinct = np.unique(points, axis=0)
    if distinct.shape[0] <= k:
        reps = int(np.ceil(k / distinct.shape[0]))
        return np.tile(distinct, (reps, 1))[:k].copy()

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))

    for _ in range(max_iter):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        new = centroids.copy()
        for c in range(k):
            members = points[assign == c]
            if len(members):
                new[c] = members.mean(axis=0)
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    return centroids


@dataclass
class AnchorBank:
    """Exactly 3 command classes x 20 anchors, plus build metadata."""

    classes: dict  # command -> list[Trajectory]
    seed: int
    source_hash: str = ""

    def __post_init__(self):
        if sorted(self.classes) != sorted(COMMANDS):
            raise AnchorBankError(f"bank must hold classes {COMMANDS}, got {sorted(self.classes)}")
        for cmd, anchors in self.classes.items():
            if len(anchors) != ANCHORS_PER_CLASS:
                raise AnchorBankError(
                    f"class {cmd!r} holds {len(anchors)} anchors, expected {ANCHORS_PER_CLASS}")

    def anchors(self, command: str) -> list:
        return self.classes[command]

    def total(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def stacked(self, command: str) -> np.ndarray:
        """(20, 8, 3) array view of one class."""
        return np.stack([a.points for a in self.classes[command]])


def cluster_anchors(labeled: Sequence[tuple[str, Trajectory]],
                    k_per_class: int = ANCHORS_PER_CLASS,
                    seed: int = 0, source_hash: str = "") -> AnchorBank:
    """Cluster expert trajectories into per-command anchor sets.

    labeled: (command, trajectory) pairs, commands limited to the three
    anchor classes. Raises naming the class when one is underpopulated.
    """
    groups: dict[str, list] = {c: [] for c in COMMANDS}
    for cmd, traj in labeled:
        if cmd not in groups:
            raise AnchorBankError(f"command {cmd!r} is not an anchor class")
        groups[cmd].append(traj)

    classes = {}
    for cmd in COMMANDS:
        trajs = groups[cmd]
        if len(trajs) < k_per_class:
            raise AnchorBankError(
                f"class {cmd!r} has {len(trajs)} trajectories, needs >= {k_per_class}")
        flat = np.stack([t.xy.reshape(-1) for t in trajs])  # (n, 16)
        centroids = kmeans(flat, k_per_class, seed=seed)
        classes[cmd] = [Trajectory.from_xy(c.reshape(N_WAYPOINTS, 2)) for c in centroids]
    return AnchorBank(classes=classes, seed=seed, source_hash=source_hash)


def select_anchor_class(action_logits: np.ndarray) -> str:
    """Argmax over the 3 action logits; ties go left < straight < right."""
    logits = np.asarray(action_logits, dtype=np.float64).reshape(-1)
    if logits.shape[0] != len(COMMANDS):
        raise ValueError(f"expected {len(COMMANDS)} action logits, got {logits.shape[0]}")
    return COMMANDS[int(np.argmax(logits))]


def select_anchor(anchors: Sequence[Trajectory],
                  scores: np.ndarray) -> tuple[int, Trajectory]:
    """Highest score wins; ties resolve to the lower anchor index."""
    if not len(anchors):
        raise ValueError("select_anchor: empty anchor class")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape[0] != len(anchors):
        raise ValueError(f"{len(anchors)} anchors but {scores.shape[0]} scores")
    idx = int(np.argmax(scores))
    return idx, anchors[idx]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def save_bank(bank: AnchorBank, path) -> None:
    doc = {
        "version": BANK_FORMAT_VERSION,
        "seed": bank.seed,
        "source_hash": bank.source_hash,
        "classes": {cmd: _encode(bank.stacked(cmd)) for cmd in COMMANDS},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_bank(path) -> AnchorBank:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != BANK_FORMAT_VERSION:
        raise AnchorBankError(
            f"{path}: bank format version {doc.get('version')}, expected {BANK_FORMAT_VERSION}")
    classes = {}
    for cmd in COMMANDS:
        arr = _decode(doc["classes"][cmd])
        classes[cmd] = [Trajectory(p) for p in arr]
    return AnchorBank(classes=classes, seed=int(doc["seed"]),
                      source_hash=doc.get("source_hash", ""))
