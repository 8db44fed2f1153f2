"""Action-motion interaction: one cross-attention applied twice.

Pass 1 queries the trajectory feature against the ego action feature as
key/value; pass 2 queries the result against the agents' motion features.
In shared mode both passes go through the identical attention module
(one parameter storage); unshared mode keeps two independent sets.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import Attention
from .autodiff import Tensor


class ActionMotionInteraction(ad.Module):
    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int = 2,
                 shared: bool = True):
        self.shared = shared
        self.attn_action = Attention(rng, dim, n_heads)
        self.attn_motion = self.attn_action if shared else Attention(rng, dim, n_heads)
        self.norm1 = ad.LayerNorm(dim)
        self.norm2 = ad.LayerNorm(dim)

    def __call__(self, trajectory_feature: Tensor, action_feature: Tensor,
                 motion_features: Tensor) -> Tensor:
        """Refine the (1, D) trajectory feature. With zero agents the second
        pass is skipped and the pass-1 output returned."""
        x = self.norm1(ad.add(trajectory_feature,
                              self.attn_action(trajectory_feature,
                                               action_feature, action_feature)))
        if motion_features.shape[0] == 0:
            return x
        return self.norm2(ad.add(x, self.attn_motion(x, motion_features, motion_features)))
