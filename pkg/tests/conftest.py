"""Shared fixtures: small model configs, tiny anchor banks, fast scenarios."""

import numpy as np
import pytest

from pieplan.anchors import cluster_anchors
from pieplan.core import COMMANDS, N_WAYPOINTS, Trajectory
from pieplan.model import ModelConfig, Planner
from pieplan.scenarios import GeneratorConfig, generate

TINY = ModelConfig(dim=8, state_dim=4, n_heads=2, fusion_layers=1, red_layers=1,
                   n_experts=3, moe_k=2, moe_hidden=16, n_agent_slots=4,
                   image_tokens=(2, 4), lidar_tokens=(4, 4), seed=3)

FAST_GEN = GeneratorConfig(lidar_cell=2.5)  # 32x32 BEV raster


def synthetic_bank(seed=0):
    rng = np.random.default_rng(seed)
    labeled = []
    for ci, cmd in enumerate(COMMANDS):
        bend = {"left": 0.5, "straight": 0.0, "right": -0.5}[cmd]
        for _ in range(25):
            t = np.arange(1, N_WAYPOINTS + 1) * 0.5
            speed = rng.uniform(2.0, 9.0)
            x = speed * t
            y = bend * (t ** 2) / 4 + rng.normal(0, 0.2)
            labeled.append((cmd, Trajectory.from_xy(np.column_stack([x, y]))))
    return cluster_anchors(labeled, seed=seed)


@pytest.fixture(scope="session")
def bank():
    return synthetic_bank()


@pytest.fixture(scope="session")
def tiny_planner(bank):
    return Planner(TINY, anchor_bank=bank)


@pytest.fixture(scope="session")
def small_scenarios():
    """A handful of quick scenarios matched to the tiny token grids."""
    cfg = GeneratorConfig(lidar_cell=5.0, image_rows=4, image_cols=8)  # 16x16 raster
    out = []
    for seed, tpl in enumerate(["straight_road", "left_turn", "right_turn",
                                "t_junction", "crosswalk", "straight_road"]):
        out.append(generate(seed, tpl, cfg))
    return out
