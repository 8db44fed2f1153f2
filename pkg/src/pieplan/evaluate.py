"""Planner evaluation and scoring over dataset splits.

Both stages fan out across scenarios with a bounded worker count and merge
results in scenario-id order, so outputs are byte-deterministic regardless
of scheduling.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .core import Trajectory, constant_velocity_trajectory
from .model import Planner, features_from_scenario
from .scoring import ScorerConfig, ScoreRecord, aggregate, score_trajectory

TRAJECTORY_FORMAT_VERSION = 1


class EvalError(Exception):
    pass


def _plan_one(planner: Planner, scenario) -> dict:
    with ad.no_grad():
        out = planner.forward(features_from_scenario(scenario, planner.config))
        traj = out.trajectory()
    return {
        "version": TRAJECTORY_FORMAT_VERSION,
        "scenario_id": scenario.id,
        "trajectory": traj.points.tolist(),
        "action_logits": out.action_logits.data.tolist(),
        "anchor_class": out.anchor_class,
        "anchor_index": out.anchor_index,
    }


def _baseline_one(scenario) -> dict:
    traj = constant_velocity_trajectory(scenario.ego)
    return {
        "version": TRAJECTORY_FORMAT_VERSION,
        "scenario_id": scenario.id,
        "trajectory": traj.points.tolist(),
        "action_logits": None,
        "anchor_class": None,
        "anchor_index": None,
    }


def _plan_chunk(args):
    planner, chunk = args
    return [_plan_one(planner, s) for s in chunk]


def run_eval(planner: Optional[Planner], scenarios: Sequence, jobs: int = 1,
             baseline: bool = False) -> list:
    """Plan every scenario; records come back sorted by scenario id."""
    if baseline:
        records = [_baseline_one(s) for s in scenarios]
    elif jobs <= 1 or len(scenarios) < 4:
        records = [_plan_one(planner, s) for s in scenarios]
    else:
        chunks = [list(scenarios[i::jobs]) for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_plan_chunk, [(planner, c) for c in chunks if c])
        records = [r for part in parts for r in part]
    return sorted(records, key=lambda r: r["scenario_id"])


def write_trajectories(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def load_trajectories(path) -> list:
    out = []
    with open(path) as fh:
        for i, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            doc = json.loads(raw)
            if doc.get("version") != TRAJECTORY_FORMAT_VERSION:
                raise EvalError(
                    f"{path}:{i}: trajectory format version {doc.get('version')}, "
                    f"expected {TRAJECTORY_FORMAT_VERSION}")
            out.append(doc)
    return out


def _score_chunk(args):
    pairs, cfg = args
    return [score_trajectory(Trajectory(np.asarray(t)), s, cfg) for t, s in pairs]


def run_score(traj_records: Sequence[dict], scenarios: Sequence,
              config: ScorerConfig = ScorerConfig(), jobs: int = 1) -> list:
    """Score each planned trajectory against its scenario, id-ordered."""
    by_id = {s.id: s for s in scenarios}
    pairs = []
    for rec in sorted(traj_records, key=lambda r: r["scenario_id"]):
        sid = rec["scenario_id"]
        if sid not in by_id:
            raise EvalError(f"trajectory for unknown scenario id {sid!r}")
        pairs.append((rec["trajectory"], by_id[sid]))
    if jobs <= 1 or len(pairs) < 4:
        return _score_chunk((pairs, config))
    chunks = [pairs[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = pool.map(_score_chunk, [(c, config) for c in chunks if c])
    records = [r for part in parts for r in part]
    return sorted(records, key=lambda r: r.scenario_id)


def write_score_report(records: Sequence[ScoreRecord], out_dir) -> dict:
    """JSONL records plus an aggregate footer, and a CSV for plotting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(records)

    with open(out_dir / "report.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r.as_dict()) + "\n")
        fh.write(json.dumps({"aggregate": agg}) + "\n")

    cols = ["scenario_id", "nc", "dac", "ep", "ttc", "c", "hc", "lk", "ec",
            "ddc", "tlc", "pdms", "epdms"]
    with open(out_dir / "report.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in records:
            doc = r.as_dict()
            fh.write(",".join(str(doc[c]) for c in cols) + "\n")
    return agg
