"""Causality, segment alignment, and ablation-mode tests for fusion."""

import numpy as np
import pytest

from pieplan.autodiff import Tensor
from pieplan.attention import Attention
from pieplan.autodiff import grad_check, no_grad
from pieplan import autodiff as ad
from pieplan.fusion import (
    FusionBranch,
    Modality,
    ModalityGrid,
    bidirectional_fuse,
    image_centric_fuse,
    lidar_centric_fuse,
    unidirectional_variant,
)


def grids(rng, hi=2, wi=4, hl=4, wl=2, d=8):
    img = ModalityGrid(Modality.IMAGE, Tensor(rng.normal(size=(hi, wi, d))))
    lid = ModalityGrid(Modality.LIDAR, Tensor(rng.normal(size=(hl, wl, d))))
    return img, lid


def test_lidar_centric_output_length():
    rng = np.random.default_rng(1)
    img, lid = grids(rng)
    out = lidar_centric_fuse(img, lid, FusionBranch(rng, 8, n_layers=1))
    assert out.shape == (2 * 4 + 4 * 2, 8)


def test_channel_mismatch_rejected():
    rng = np.random.default_rng(2)
    img = ModalityGrid(Modality.IMAGE, Tensor(rng.normal(size=(2, 2, 8))))
    lid = ModalityGrid(Modality.LIDAR, Tensor(rng.normal(size=(2, 2, 6))))
    with pytest.raises(ValueError, match="channel mismatch"):
        lidar_centric_fuse(img, lid, FusionBranch(rng, 8))


def test_lidar_perturbation_never_leaks_into_image_segment():
    rng = np.random.default_rng(3)
    img, lid = grids(rng)
    branch = FusionBranch(rng, 8, n_layers=2)
    with no_grad():
        base = lidar_centric_fuse(img, lid, branch).data
        pert_vals = lid.values.data.copy()
        pert_vals[1, 1, 3] += 2.5
        pert = ModalityGrid(Modality.LIDAR, Tensor(pert_vals))
        out = lidar_centric_fuse(img, pert, branch).data
    n_img = 8
    assert np.array_equal(out[:n_img], base[:n_img])  # exact zeros upstream
    assert np.abs(out[n_img:] - base[n_img:]).max() > 0


def test_image_token_zero_influences_lidar_segment():
    rng = np.random.default_rng(4)
    img, lid = grids(rng)
    branch = FusionBranch(rng, 8, n_layers=1)
    with no_grad():
        base = lidar_centric_fuse(img, lid, branch).data
        pert_vals = img.values.data.copy()
        pert_vals[0, 0, 0] += 1.0
        out = lidar_centric_fuse(ModalityGrid(Modality.IMAGE, Tensor(pert_vals)),
                                 lid, branch).data
    assert np.abs(out[8:] - base[8:]).max() > 0


def test_image_centric_mirror():
    rng = np.random.default_rng(5)
    img, lid = grids(rng)
    branch = FusionBranch(rng, 8, n_layers=1)
    with no_grad():
        base = image_centric_fuse(img, lid, branch).data
        pert_vals = img.values.data.copy()
        pert_vals[1, 2, 5] -= 3.0
        out = image_centric_fuse(ModalityGrid(Modality.IMAGE, Tensor(pert_vals)),
                                 lid, branch).data
    n_lid = 8
    assert np.array_equal(out[:n_lid], base[:n_lid])


def test_bidirectional_shapes_and_identity_doubling():
    rng = np.random.default_rng(6)
    img, lid = grids(rng)
    ident_a = FusionBranch(rng, 8, identity=True)
    ident_b = FusionBranch(rng, 8, identity=True)
    fused = bidirectional_fuse(img, lid, ident_a, ident_b)
    assert fused.image_out.values.shape == img.values.shape
    assert fused.lidar_out.values.shape == lid.values.shape
    assert np.allclose(fused.image_out.values.data, 2 * img.values.data, atol=1e-15)
    assert np.allclose(fused.lidar_out.values.data, 2 * lid.values.data, atol=1e-15)


def test_bidirectional_matches_index_bookkeeping_oracle():
    rng = np.random.default_rng(7)
    img, lid = grids(rng)
    branch_lc = FusionBranch(rng, 8, n_layers=1)
    branch_ic = FusionBranch(rng, 8, n_layers=1)
    fused = bidirectional_fuse(img, lid, branch_lc, branch_ic)

    # oracle: run branches independently and add by explicit token index maps
    with no_grad():
        lc = lidar_centric_fuse(img, lid, branch_lc).data
        ic = image_centric_fuse(img, lid, branch_ic).data
    n_img, n_lid = 8, 8
    img_expected = np.zeros((n_img, 8))
    lid_expected = np.zeros((n_lid, 8))
    for tok in range(n_img):
        img_expected[tok] = lc[tok] + ic[n_lid + tok]
    for tok in range(n_lid):
        lid_expected[tok] = lc[n_img + tok] + ic[tok]
    assert np.array_equal(fused.image_out.values.data.reshape(n_img, 8), img_expected)
    assert np.array_equal(fused.lidar_out.values.data.reshape(n_lid, 8), lid_expected)


def test_segment_alignment_tracer():
    # unique token ids survive an identity pipeline and pair with themselves
    rng = np.random.default_rng(8)
    d = 8
    img_vals = np.arange(2 * 4 * d, dtype=float).reshape(2, 4, d)
    lid_vals = 1000.0 + np.arange(4 * 2 * d, dtype=float).reshape(4, 2, d)
    img = ModalityGrid(Modality.IMAGE, Tensor(img_vals))
    lid = ModalityGrid(Modality.LIDAR, Tensor(lid_vals))
    fused = bidirectional_fuse(img, lid,
                               FusionBranch(rng, d, identity=True),
                               FusionBranch(rng, d, identity=True))
    assert np.array_equal(fused.image_out.values.data, 2 * img_vals)
    assert np.array_equal(fused.lidar_out.values.data, 2 * lid_vals)


def test_plus_minus_equals_bidirectional():
    rng = np.random.default_rng(9)
    img, lid = grids(rng)
    a = FusionBranch(rng, 8, n_layers=1)
    b = FusionBranch(rng, 8, n_layers=1)
    v = unidirectional_variant(img, lid, a, b, "+-")
    f = bidirectional_fuse(img, lid, a, b)
    assert np.array_equal(v.image_out.values.data, f.image_out.values.data)
    assert np.array_equal(v.lidar_out.values.data, f.lidar_out.values.data)


def test_plus_plus_identical_branches_double():
    rng = np.random.default_rng(10)
    img, lid = grids(rng)
    a = FusionBranch(rng, 8, n_layers=1)
    v = unidirectional_variant(img, lid, a, a, "++")
    with no_grad():
        single = lidar_centric_fuse(img, lid, a).data
    assert np.allclose(v.image_out.values.data.reshape(8, 8), 2 * single[:8], atol=1e-15)
    assert np.allclose(v.lidar_out.values.data.reshape(8, 8), 2 * single[8:], atol=1e-15)


def test_plus_plus_differs_from_plus_minus():
    rng = np.random.default_rng(11)
    img, lid = grids(rng)
    a = FusionBranch(rng, 8, n_layers=1)
    b = FusionBranch(rng, 8, n_layers=1)
    pp = unidirectional_variant(img, lid, a, b, "++")
    pm = unidirectional_variant(img, lid, a, b, "+-")
    diff = max(np.abs(pp.image_out.values.data - pm.image_out.values.data).max(),
               np.abs(pp.lidar_out.values.data - pm.lidar_out.values.data).max())
    assert diff > 0


def test_unknown_mode_rejected():
    rng = np.random.default_rng(12)
    img, lid = grids(rng)
    a = FusionBranch(rng, 8)
    with pytest.raises(ValueError, match="fusion mode"):
        unidirectional_variant(img, lid, a, a, "--")


@pytest.mark.parametrize("hi,wi,hl,wl,d", [(4, 4, 4, 4, 8), (2, 8, 8, 2, 8), (8, 2, 2, 8, 16)])
def test_shape_preservation_and_determinism_grid(hi, wi, hl, wl, d):
    rng = np.random.default_rng(13)
    img = ModalityGrid(Modality.IMAGE, Tensor(rng.normal(size=(hi, wi, d))))
    lid = ModalityGrid(Modality.LIDAR, Tensor(rng.normal(size=(hl, wl, d))))
    branch_lc = FusionBranch(rng, d, n_layers=1)
    branch_ic = FusionBranch(rng, d, n_layers=1)
    fused = bidirectional_fuse(img, lid, branch_lc, branch_ic)
    assert fused.image_out.values.shape == (hi, wi, d)
    assert fused.lidar_out.values.shape == (hl, wl, d)
    again = bidirectional_fuse(img, lid, branch_lc, branch_ic)
    assert np.array_equal(fused.image_out.values.data, again.image_out.values.data)
    assert np.array_equal(fused.lidar_out.values.data, again.lidar_out.values.data)


def test_attention_singleton_key():
    rng = np.random.default_rng(14)
    attn = Attention(rng, dim=8, n_heads=2)
    q = Tensor(rng.normal(size=(3, 8)))
    kv = Tensor(rng.normal(size=(1, 8)))
    out = attn(q, kv, kv)
    # softmax over one key is 1: output = W_o(W_v(kv)) for every query row
    expect = (kv.data @ attn.w_v.w.data) @ attn.w_o.w.data
    assert np.allclose(out.data, np.repeat(expect, 3, axis=0), atol=1e-12)


def test_attention_kv_permutation_invariance():
    rng = np.random.default_rng(15)
    attn = Attention(rng, dim=8, n_heads=2)
    q = Tensor(rng.normal(size=(2, 8)))
    kv = rng.normal(size=(5, 8))
    perm = np.random.default_rng(0).permutation(5)
    out1 = attn(q, Tensor(kv), Tensor(kv)).data
    out2 = attn(q, Tensor(kv[perm]), Tensor(kv[perm])).data
    assert np.allclose(out1, out2, atol=1e-12)


def test_attention_vs_loop_oracle():
    rng = np.random.default_rng(16)
    attn = Attention(rng, dim=8, n_heads=2)
    q = Tensor(rng.normal(size=(3, 8)))
    k = Tensor(rng.normal(size=(5, 8)))
    v = Tensor(rng.normal(size=(5, 8)))
    out = attn(q, k, v).data

    qp, kp, vp = q.data @ attn.w_q.w.data, k.data @ attn.w_k.w.data, v.data @ attn.w_v.w.data
    hd = 4
    expect = np.zeros((3, 8))
    for h in range(2):
        qs, ks, vs = qp[:, h * hd:(h + 1) * hd], kp[:, h * hd:(h + 1) * hd], vp[:, h * hd:(h + 1) * hd]
        for i in range(3):
            scores = np.array([qs[i] @ ks[j] / np.sqrt(hd) for j in range(5)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            expect[i, h * hd:(h + 1) * hd] = sum(w[j] * vs[j] for j in range(5))
    expect = expect @ attn.w_o.w.data
    assert np.max(np.abs(out - expect)) < 1e-12


def test_attention_empty_keys_rejected():
    rng = np.random.default_rng(17)
    attn = Attention(rng, dim=8, n_heads=2)
    with pytest.raises(ValueError, match="empty"):
        attn(Tensor(rng.normal(size=(2, 8))), Tensor(np.zeros((0, 8))), Tensor(np.zeros((0, 8))))


def test_attention_grad_check():
    rng = np.random.default_rng(18)
    attn = Attention(rng, dim=8, n_heads=2)
    kv = Tensor(rng.normal(size=(4, 8)))
    mix = Tensor(rng.normal(size=(3, 8)))
    err = grad_check(lambda t: ad.sum_(ad.mul(attn(t, kv, kv), mix)),
                     Tensor(rng.normal(size=(3, 8))))
    assert err < 1e-6
