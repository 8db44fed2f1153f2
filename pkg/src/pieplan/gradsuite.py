"""Finite-difference verification suite: every primitive plus every
composite block, at toy dimensions. Used by the `gradcheck` CLI command
and the acceptance tests.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .interaction import ActionMotionInteraction
from .moe import MoeLayer, moe_forward
from .red import RedLayer
from .ssm import SsmBlock, ssm_scan

PRIMITIVE_TOL = 1e-6
BLOCK_TOL = 1e-5


def primitive_cases(rng: np.random.Generator) -> dict:
    """Scalar-valued probes, one per primitive; constants frozen per case."""
    shape = (5, 4)
    c_same = Tensor(rng.normal(size=shape))
    c_pos = Tensor(2.0 + np.abs(rng.normal(size=shape)))
    c_mat = Tensor(rng.normal(size=(shape[1], 3)))
    c_t = Tensor(rng.normal(size=shape[::-1]))
    c_flat = Tensor(rng.normal(size=int(np.prod(shape))))
    c_row = Tensor(rng.normal(size=shape[1:]))
    c_col = Tensor(rng.normal(size=shape[0]))
    c_scat = Tensor(rng.normal(size=(6,) + shape[1:]))
    c_decay = Tensor(rng.uniform(0.05, 0.95, size=shape))
    c_B = Tensor(rng.normal(size=(shape[0], 3)))
    c_C = Tensor(rng.normal(size=(shape[0], 3)))
    return {
        "add": lambda t: ad.sum_(ad.add(t, c_same)),
        "sub": lambda t: ad.sum_(ad.sub(c_same, t)),
        "mul": lambda t: ad.sum_(ad.mul(t, t)),
        "div": lambda t: ad.sum_(ad.div(t, c_pos)),
        "neg": lambda t: ad.sum_(ad.neg(t)),
        "matmul": lambda t: ad.sum_(ad.matmul(t, c_mat)),
        "concat": lambda t: ad.sum_(ad.concat([t, ad.mul(t, t)], axis=0)),
        "split": lambda t: ad.sum_(ad.split(t, [2, shape[0] - 2], axis=0)[0]),
        "softmax": lambda t: ad.sum_(ad.mul(ad.softmax(t, axis=-1), c_same)),
        "silu": lambda t: ad.sum_(ad.silu(t)),
        "layer_norm": lambda t: ad.sum_(ad.mul(ad.layer_norm(t), c_same)),
        "transpose": lambda t: ad.sum_(ad.mul(ad.transpose(t), c_t)),
        "reshape": lambda t: ad.sum_(ad.mul(ad.reshape(t, (t.size,)), c_flat)),
        "sum": lambda t: ad.sum_(ad.mul(ad.sum_(t, axis=0), c_row)),
        "mean": lambda t: ad.sum_(ad.mul(ad.mean_(t, axis=1), c_col)),
        "abs": lambda t: ad.sum_(ad.abs_(t)),
        "exp": lambda t: ad.sum_(ad.exp(t)),
        "log": lambda t: ad.sum_(ad.log(ad.add(ad.abs_(t), Tensor(1.0)))),
        "cos": lambda t: ad.sum_(ad.cos(t)),
        "sin": lambda t: ad.sum_(ad.sin(t)),
        "sigmoid": lambda t: ad.sum_(ad.sigmoid(t)),
        "softplus": lambda t: ad.sum_(ad.softplus(t)),
        "gather": lambda t: ad.sum_(ad.gather(t, [0, 2, 2, 1])),
        "scatter_add": lambda t: ad.sum_(
            ad.mul(ad.scatter_add(t, [1, 0, 1, 3, 2], 6), c_scat)),
        "embedding_lookup": lambda t: ad.sum_(ad.embedding_lookup(t, [3, 1])),
        "ssm_scan": lambda t: ad.sum_(ad.mul(
            ssm_scan(c_decay, c_B, c_C, t), c_same)),
    }


def block_cases(rng: np.random.Generator) -> dict:
    """Composite-block probes: gradient through each block to a scalar."""
    dim = 6
    mamba = SsmBlock(rng, dim, state_dim=4)
    mix_m = Tensor(rng.normal(size=(4, dim)))

    moe = MoeLayer(rng, dim, n_experts=3, hidden=12, k=2)
    x0 = Tensor(rng.normal(size=(3, dim)))
    _, frozen = moe_forward(x0, moe)
    mix_e = Tensor(rng.normal(size=(3, dim)))

    red = RedLayer(rng, dim, state_dim=4, n_experts=3, k=2, moe_hidden=12, n_heads=2)
    enc = Tensor(rng.normal(size=(8, dim)))
    mix_r = Tensor(rng.normal(size=(4, dim)))
    q0 = Tensor(rng.normal(size=(4, dim)))
    _, red_frozen = red(q0, enc)

    inter = ActionMotionInteraction(rng, dim, n_heads=2, shared=True)
    act = Tensor(rng.normal(size=(1, dim)))
    mot = Tensor(rng.normal(size=(3, dim)))
    mix_i = Tensor(rng.normal(size=(1, dim)))

    def red_f(t):
        out, _ = red(t, enc, frozen_decisions=red_frozen)
        return ad.sum_(ad.mul(out.final, mix_r))

    def moe_f(t):
        y, _ = moe_forward(t, moe, frozen_decisions=frozen)
        return ad.sum_(ad.mul(y, mix_e))

    return {
        "mamba_block": (lambda t: ad.sum_(ad.mul(mamba(t), mix_m)),
                        Tensor(rng.normal(size=(4, dim)))),
        "moe_forward": (moe_f, Tensor(x0.data.copy())),
        "red_layer": (red_f, Tensor(q0.data.copy())),
        "action_motion_interact": (
            lambda t: ad.sum_(ad.mul(inter(t, act, mot), mix_i)),
            Tensor(rng.normal(size=(1, dim)))),
    }


def full_model_case(rng: np.random.Generator):
    """Gradient through the whole planner to a scalar loss, selection frozen,
    probing the decoder queries (they touch every stage)."""
    from .anchors import cluster_anchors
    from .core import COMMANDS, N_WAYPOINTS, Trajectory
    from .model import ModelConfig, ModelInput, Planner

    labeled = []
    bank_rng = np.random.default_rng(7)
    for cmd in COMMANDS:
        bend = {"left": 0.5, "straight": 0.0, "right": -0.5}[cmd]
        for _ in range(22):
            t = np.arange(1, N_WAYPOINTS + 1) * 0.5
            x = bank_rng.uniform(2, 9) * t
            y = bend * t ** 2 / 4 + bank_rng.normal(0, 0.2)
            labeled.append((cmd, Trajectory.from_xy(np.column_stack([x, y]))))
    bank = cluster_anchors(labeled, seed=1)

    cfg = ModelConfig(dim=8, state_dim=4, n_heads=2, fusion_layers=1, red_layers=1,
                      n_experts=3, moe_k=2, moe_hidden=16, n_agent_slots=2,
                      image_tokens=(2, 2), lidar_tokens=(2, 2), seed=5)
    planner = Planner(cfg, anchor_bank=bank)
    status = np.zeros(6)
    status[0] = 4.0
    status[3] = 1.0
    inp = ModelInput(image_tokens=rng.normal(size=(2, 2, 4)),
                     lidar_tokens=rng.normal(size=(2, 2, 4)),
                     ego_status=status)
    frozen = planner.forward(inp).frozen_choices()

    def f(t):
        original = planner.queries.queries
        planner.queries.queries = t
        try:
            out = planner.forward(inp, frozen=frozen)
            return ad.add(ad.mean_(ad.mul(out.traj, out.traj)),
                          ad.mean_(ad.mul(out.action_logits, out.action_logits)))
        finally:
            planner.queries.queries = original

    return f, Tensor(planner.queries.queries.data.copy())


def run_suite(report: Callable[[str], None] = print, seed: int = 12345) -> bool:
    """Run every check; prints one line per case; True when all pass."""
    rng = np.random.default_rng(seed)
    ok = True

    for name, f in primitive_cases(rng).items():
        worst = 0.0
        for _ in range(3):
            worst = max(worst, grad_check(f, Tensor(rng.normal(size=(5, 4)))))
        passed = worst < PRIMITIVE_TOL
        ok &= passed
        report(f"[{'PASS' if passed else 'FAIL'}] primitive {name:18s} "
               f"max rel err {worst:.3e} (tol {PRIMITIVE_TOL:.0e})")

    for name, (f, x) in block_cases(rng).items():
        err = grad_check(f, x)
        passed = err < BLOCK_TOL
        ok &= passed
        report(f"[{'PASS' if passed else 'FAIL'}] block     {name:18s} "
               f"max rel err {err:.3e} (tol {BLOCK_TOL:.0e})")

    f, x = full_model_case(rng)
    err = grad_check(f, x)
    passed = err < BLOCK_TOL
    ok &= passed
    report(f"[{'PASS' if passed else 'FAIL'}] model     full_forward       "
           f"max rel err {err:.3e} (tol {BLOCK_TOL:.0e})")
    return ok
