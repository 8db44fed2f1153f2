"""Selective state-space sequence transform.

Two routes compute the same map: a linear-time recurrent scan (the one the
model trains through) and a materialized L x L lower-triangular matrix that
serves as the correctness oracle. The scan uses scalar-times-identity decay
per channel; the oracle additionally supports diagonal state decay for
stress tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SsmSequenceParams:
    """Per-timestep selective parameters driving the recurrence.

    a: (L,) scalar decay in (0, 1]; B: (L, N) input projections;
    C: (L, N) readout projections.
    """

    a: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.C = np.asarray(self.C, dtype=np.float64)
        L = self.a.shape[0]
        if self.B.shape[0] != L or self.C.shape[0] != L:
            raise ValueError(
                f"B/C row counts {self.B.shape[0]}/{self.C.shape[0]} must equal L={L}")
        if self.B.shape[1] != self.C.shape[1]:
            raise ValueError("B and C must share the state dimension")
        if not (np.isfinite(self.a).all() and np.isfinite(self.B).all()
                and np.isfinite(self.C).all()):
            raise ValueError("sequence params must be finite")
        if L and (self.a.min() <= 0.0 or self.a.max() > 1.0):
            raise ValueError("decay values must lie in (0, 1]")

    @property
    def seq_len(self) -> int:
        return self.a.shape[0]

    @property
    def state_dim(self) -> int:
        return self.B.shape[1]


def ssm_materialize(params: SsmSequenceParams) -> np.ndarray:
    """Build the dense L x L map M with M[j, i] = C_j^T (prod_{r=i+1..j} a_r) B_i.

    Strictly lower-triangular-plus-diagonal; y = M @ x reproduces the scan.
    """
    L, _ = params.a.shape[0], params.state_dim
    M = np.zeros((L, L))
    for j in range(L):
        decay = 1.0
        for i in range(j, -1, -1):
            if i < j:
                decay *= params.a[i + 1]
            M[j, i] = decay * float(params.C[j] @ params.B[i])
    return M


def ssm_materialize_diag(a_diag: np.ndarray, B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Oracle variant with diagonal per-state decay a_diag: (L, N)."""
    L, N = a_diag.shape
    M = np.zeros((L, L))
    for j in range(L):
        decay = np.ones(N)
        for i in range(j, -1, -1):
            if i < j:
                decay = decay * a_diag[i + 1]
            M[j, i] = float(C[j] @ (decay * B[i]))
    return M


def ssm_scan_np(params: SsmSequenceParams, x: np.ndarray) -> np.ndarray:
    """Reference recurrence on plain arrays (used by tests and the oracle)."""
    L, N = params.seq_len, params.state_dim
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != L:
        raise ValueError(f"input length {x.shape[0]} != L={L}")
    h = np.zeros(N)
    y = np.zeros(L)
    for t in range(L):
        h = params.a[t] * h + params.B[t] * x[t]
        y[t] = params.C[t] @ h
    return y


def ssm_scan(a: Tensor, B: Tensor, C: Tensor, x: Tensor) -> Tensor:
    """Differentiable multi-channel scan.

    a, x: (L, ch) per-channel decay and input; B, C: (L, N) shared across
    channels. Hidden state h: (ch, N) recurs as
        h_t = a_t[:, None] * h_{t-1} + x_t[:, None] * B_t[None, :]
        y_t = h_t @ C_t
    Implemented as one graph primitive with a hand-derived backward rule
    (checked against finite differences and the materialized-matrix oracle).
    """
    L, ch = x.shape
    if a.shape != (L, ch):
        raise ValueError(f"decay shape {a.shape} != input shape {(L, ch)}")
    if B.shape[0] != L or C.shape[0] != L or B.shape != C.shape:
        raise ValueError(f"B/C shapes {B.shape}/{C.shape} incompatible with L={L}")
    if not (np.isfinite(a.data).all() and np.isfinite(x.data).all()
            and np.isfinite(B.data).all() and np.isfinite(C.data).all()):
        raise ValueError("ssm_scan: non-finite input")
    N = B.shape[1]
    ad_, Bd, Cd, xd = a.data, B.data, C.data, x.data

    hist = np.zeros((L, ch, N))
    h = np.zeros((ch, N))
    y = np.zeros((L, ch))
    for t in range(L):
        h = ad_[t][:, None] * h + xd[t][:, None] * Bd[t][None, :]
        hist[t] = h
        y[t] = h @ Cd[t]

    def bw(g):
        da = np.zeros_like(ad_)
        dB = np.zeros_like(Bd)
        dC = np.zeros_like(Cd)
        dx = np.zeros_like(xd)
        dh = np.zeros((ch, N))
        for t in range(L - 1, -1, -1):
            dh = dh + g[t][:, None] * Cd[t][None, :]
            dC[t] = hist[t].T @ g[t]
            h_prev = hist[t - 1] if t > 0 else np.zeros((ch, N))
            da[t] = (dh * h_prev).sum(axis=1)
            dx[t] = dh @ Bd[t]
            dB[t] = xd[t] @ dh
            dh = ad_[t][:, None] * dh
        return da, dB, dC, dx

    return ad._make("ssm_scan", y, (a, B, C, x), bw)


class SsmBlock(ad.Module):
    """Gated sequence block: project -> select (a, B, C) -> scan -> gate -> project, plus residual.

    Selectivity: the per-timestep decay, input and readout projections are
    functions of the input sequence. Decay is a_t = exp(-softplus(logit_t))
    with a learned per-channel bias, keeping a_t in (0, 1).
    identity=True turns the block into a pass-through (used by fusion
    alignment tests and the no-fusion ablation).
    """

    def __init__(self, rng: np.random.Generator, model_dim: int, state_dim: int = 8,
                 expand: int = 2, identity: bool = False):
        self.model_dim = model_dim
        self.state_dim = state_dim
        self.inner = expand * model_dim
        self.identity = identity
        if identity:
            return
        width = 2 * self.inner + self.inner + 2 * state_dim  # z, gate, a-logit, B, C
        self.in_proj = ad.Linear(rng, model_dim, width, bias=False)
        self.a_bias = Tensor(np.zeros(self.inner), requires_grad=True)
        self.out_proj = ad.Linear(rng, self.inner, model_dim, bias=False)
        self.norm = ad.LayerNorm(model_dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or (not self.identity and x.shape[1] != self.model_dim):
            raise ValueError(f"SsmBlock: expected (L, {self.model_dim}), got {x.shape}")
        if self.identity:
            return x
        xn = self.norm(x)
        proj = self.in_proj(xn)
        z, gate, a_logit, B, C = ad.split(
            proj, [self.inner, self.inner, self.inner, self.state_dim, self.state_dim], axis=1)
        a = ad.exp(ad.neg(ad.softplus(ad.add(a_logit, self.a_bias))))
        y = ssm_scan(a, B, C, z)
        y = ad.mul(y, ad.silu(gate))
        return ad.add(x, self.out_proj(y))
