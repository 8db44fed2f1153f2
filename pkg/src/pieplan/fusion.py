"""Bidirectional sequence fusion of two modality grids.

Each branch flattens both grids row-major, concatenates them in one of
the two orders, and runs a stack of gated SSM blocks over the combined
sequence; causality makes the trailing segment condition on the leading
one. The two branch outputs are split back into per-modality segments
and added token-by-token.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import SsmBlock


class Modality(Enum):
    IMAGE = "image"
    LIDAR = "lidar"


@dataclass
class ModalityGrid:
    """H x W x D feature grid for one sensor stream."""

    modality: Modality
    values: Tensor  # (H, W, D)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def tokens(self) -> Tensor:
        """Row-major flattening to (H*W, D)."""
        h, w, d = self.values.shape
        return ad.reshape(self.values, (h * w, d))


@dataclass
class FusedFeatures:
    image_out: ModalityGrid
    lidar_out: ModalityGrid


class FusionBranch(ad.Module):
    """Stack of SSM blocks applied to one concatenation order."""

    def __init__(self, rng: np.random.Generator, dim: int, n_layers: int = 2,
                 state_dim: int = 8, identity: bool = False):
        self.layers = [SsmBlock(rng, dim, state_dim=state_dim, identity=identity)
                       for _ in range(n_layers)]

    def __call__(self, seq: Tensor) -> Tensor:
        for layer in self.layers:
            seq = layer(seq)
        return seq


def _check_channels(img: ModalityGrid, lid: ModalityGrid) -> None:
    if img.channels != lid.channels:
        raise ValueError(
            f"fusion: channel mismatch, image D={img.channels} vs lidar D={lid.channels}")


def lidar_centric_fuse(img: ModalityGrid, lid: ModalityGrid, branch: FusionBranch) -> Tensor:
    """Image tokens lead, LiDAR tokens trail: the LiDAR segment conditions
    on all image context."""
    _check_channels(img, lid)
    return branch(ad.concat([img.tokens(), lid.tokens()], axis=0))


def image_centric_fuse(img: ModalityGrid, lid: ModalityGrid, branch: FusionBranch) -> Tensor:
    """Reversed order: LiDAR tokens lead, image tokens trail."""
    _check_channels(img, lid)
    return branch(ad.concat([lid.tokens(), img.tokens()], axis=0))


def _to_grid(tokens: Tensor, like: ModalityGrid) -> ModalityGrid:
    h, w, d = like.values.shape
    return ModalityGrid(like.modality, ad.reshape(tokens, (h, w, d)))


def bidirectional_fuse(img: ModalityGrid, lid: ModalityGrid,
                       branch_lc: FusionBranch, branch_ic: FusionBranch) -> FusedFeatures:
    """Run both orders and add the per-modality segments element-wise.

    Segments are extracted before the addition so every added pair comes
    from the same (modality, position) token in both branches.
    """
    n_img = img.height * img.width
    n_lid = lid.height * lid.width
    lc = lidar_centric_fuse(img, lid, branch_lc)
    ic = image_centric_fuse(img, lid, branch_ic)
    lc_img, lc_lid = ad.split(lc, [n_img, n_lid], axis=0)
    ic_lid, ic_img = ad.split(ic, [n_lid, n_img], axis=0)
    return FusedFeatures(
        image_out=_to_grid(ad.add(lc_img, ic_img), img),
        lidar_out=_to_grid(ad.add(lc_lid, ic_lid), lid),
    )


def unidirectional_variant(img: ModalityGrid, lid: ModalityGrid,
                           branch_a: FusionBranch, branch_b: FusionBranch,
                           mode: str) -> FusedFeatures:
    """Ablation orders: "+-" is the bidirectional configuration, "++" runs
    two LiDAR-centric branches and adds them."""
    if mode == "+-":
        return bidirectional_fuse(img, lid, branch_a, branch_b)
    if mode != "++":
        raise ValueError(f"unknown fusion mode {mode!r} (expected '++' or '+-')")
    n_img = img.height * img.width
    n_lid = lid.height * lid.width
    a = lidar_centric_fuse(img, lid, branch_a)
    b = lidar_centric_fuse(img, lid, branch_b)
    both = ad.add(a, b)
    img_seq, lid_seq = ad.split(both, [n_img, n_lid], axis=0)
    return FusedFeatures(
        image_out=_to_grid(img_seq, img),
        lidar_out=_to_grid(lid_seq, lid),
    )
