"""Multi-head scaled dot-product attention (projection weights bias-free)."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Attention(ad.Module):
    """Cross- or self-attention: softmax(QK^T / sqrt(head_dim)) V per head,
    heads concatenated, output-projected."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int = 2):
        if dim % n_heads != 0:
            raise ValueError(f"attention dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = ad.Linear(rng, dim, dim, bias=False)
        self.w_k = ad.Linear(rng, dim, dim, bias=False)
        self.w_v = ad.Linear(rng, dim, dim, bias=False)
        self.w_o = ad.Linear(rng, dim, dim, bias=False)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if k.shape[0] == 0:
            raise ValueError("attention: empty key/value sequence")
        if q.shape[1] != self.dim or k.shape[1] != self.dim or v.shape[1] != self.dim:
            raise ValueError(
                f"attention: expected feature dim {self.dim}, got "
                f"q{q.shape} k{k.shape} v{v.shape}")
        if k.shape[0] != v.shape[0]:
            raise ValueError(f"attention: key/value length mismatch {k.shape} vs {v.shape}")
        qp = self.w_q(q)
        kp = self.w_k(k)
        vp = self.w_v(v)
        sizes = [self.head_dim] * self.n_heads
        q_heads = ad.split(qp, sizes, axis=1)
        k_heads = ad.split(kp, sizes, axis=1)
        v_heads = ad.split(vp, sizes, axis=1)
        scale = Tensor(1.0 / math.sqrt(self.head_dim))
        outs = []
        for qh, kh, vh in zip(q_heads, k_heads, v_heads):
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            outs.append(ad.matmul(ad.softmax(scores, axis=1), vh))
        return self.w_o(ad.concat(outs, axis=1))
