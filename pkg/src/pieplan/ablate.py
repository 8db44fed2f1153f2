"""Ablation harness: trains and scores a planner variant per matrix row and
emits a comparison table (CSV plus aligned text).

Matrices mirror the architecture knobs: fusion order (none/++/+-), the
reasoning stage on/off, shared vs unshared interaction attention, and the
expert count.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Sequence

from .anchors import AnchorBank
from .evaluate import run_eval, run_score
from .model import ModelConfig, Planner
from .scoring import ScorerConfig, aggregate
from .training import TrainConfig, train

MATRICES: dict = {
    "fusion": [("none", {"fusion": "none"}),
               ("++", {"fusion": "++"}),
               ("+-", {"fusion": "+-"})],
    "red": [("off", {"red_mamba": False, "red_moe": False}),
            ("on", {"red_mamba": True, "red_moe": True})],
    "interaction": [("off", {"interaction": "off"}),
                    ("unshared", {"interaction": "unshared"}),
                    ("shared", {"interaction": "shared"})],
    "experts": [("2", {"n_experts": 2}),
                ("3", {"n_experts": 3}),
                ("4", {"n_experts": 4})],
}


def run_matrix(matrix: str, base_model: ModelConfig, train_cfg: TrainConfig,
               train_set: Sequence, val_set: Sequence, bank: AnchorBank,
               out_dir, scorer: ScorerConfig = ScorerConfig(),
               jobs: int = 1) -> list:
    """One row per variant: train from scratch, evaluate, score."""
    if matrix not in MATRICES:
        raise ValueError(f"unknown ablation matrix {matrix!r} "
                         f"(expected one of {sorted(MATRICES)} or 'all')")
    out_dir = Path(out_dir)
    rows = []
    for variant, changes in MATRICES[matrix]:
        model_cfg = dataclasses.replace(base_model, **changes)
        planner = Planner(model_cfg, anchor_bank=bank)
        work = out_dir / f"{matrix}_{variant.replace('+', 'p')}"
        train(planner, train_set, train_cfg, work)
        records = run_score(run_eval(planner, val_set, jobs=jobs), val_set,
                            scorer, jobs=jobs)
        agg = aggregate(records)
        sub = agg["mean_subscores"]
        rows.append({
            "matrix": matrix, "variant": variant,
            "params": planner.parameter_count(),
            "pdms": agg["mean_pdms"], "epdms": agg["mean_epdms"],
            "nc": sub["nc"], "dac": sub["dac"], "ep": sub["ep"],
            "ttc": sub["ttc"], "c": sub["c"],
        })
    return rows


def run_matrices(matrix: str, base_model: ModelConfig, train_cfg: TrainConfig,
                 train_set: Sequence, val_set: Sequence, bank: AnchorBank,
                 out_dir, scorer: ScorerConfig = ScorerConfig(),
                 jobs: int = 1) -> list:
    names = sorted(MATRICES) if matrix == "all" else [matrix]
    rows = []
    for name in names:
        rows.extend(run_matrix(name, base_model, train_cfg, train_set, val_set,
                               bank, out_dir, scorer, jobs))
    return rows


COLUMNS = ("matrix", "variant", "params", "nc", "dac", "ep", "ttc", "c",
           "pdms", "epdms")


def write_table(rows: Sequence[dict], out_dir) -> str:
    """CSV plus an aligned text rendering; returns the text table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in COLUMNS) + "\n")

    cells = [[c for c in COLUMNS]]
    for r in rows:
        cells.append([_fmt(r[c]) for c in COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    text = "\n".join(lines) + "\n"
    (out_dir / "ablation.txt").write_text(text)
    return text


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
