import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitsmall import tensor as T
from vitsmall.tensor import DimensionError, ParameterError
from vitsmall.vit import (ViT, ViTConfig, init_weights, interpolate_pos_embed, parameter_count, patch_size_for,
                          patchify, truncated_normal, unpatchify)

from oracles import FD_TOL, bilinear_align_corners, vit_gradcheck


def tiny(depth=1, dim=8, heads=2, size=8, patch=4, dtype="float64", **kw):
    return ViTConfig(image_size=(size, size), patch_size=patch, depth=depth, dim=dim, heads=heads, dtype=dtype, **kw)


def test_patch_token_counts():
    assert patchify(np.zeros((32, 32, 3)), 4).shape == (64, 48)
    assert patchify(np.zeros((64, 64, 3)), 8).shape == (64, 192)
    assert patchify(np.zeros((16, 16, 3)), 4).shape == (16, 48)
    assert patch_size_for(32) == 4 and patch_size_for(64) == 8


def test_patchify_round_trip_and_order():
    x = np.arange(2 * 8 * 8 * 3, dtype=np.float64).reshape(2, 8, 8, 3)
    p = patchify(x, 4)
    np.testing.assert_array_equal(unpatchify(p, 4, 8, 8), x)
    # second patch is the top-right 4x4 block
    np.testing.assert_array_equal(p[0, 1].reshape(4, 4, 3), x[0, :4, 4:])


def test_patchify_rejects_indivisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((30, 32, 3)), 4)


def test_config_validation():
    with pytest.raises(ParameterError):
        ViTConfig(image_size=(30, 32), patch_size=4)
    with pytest.raises(ParameterError):
        ViTConfig(dim=10, heads=3)
    with pytest.raises(ParameterError):
        ViTConfig(depth=0)
    with pytest.raises(ParameterError):
        ViTConfig(mlp_ratio=0.5)


def test_dpe_identity_constant_and_ramp():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((4, 4, 5))
    assert interpolate_pos_embed(g, 4) is g
    const = np.full((2, 2, 3), 0.7)
    for t in (1, 2, 3, 5, 8):
        np.testing.assert_allclose(interpolate_pos_embed(const, t), 0.7, atol=1e-12)
    ys, xs = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    ramp = np.stack([2 * ys + 3 * xs + 1, ys - xs], axis=-1).astype(np.float64)
    out = interpolate_pos_embed(ramp, 2)
    # align-corners samples land on grid coordinates {0, 3}
    for i, y in enumerate((0, 3)):
        for j, x in enumerate((0, 3)):
            np.testing.assert_allclose(out[i, j], [2 * y + 3 * x + 1, y - x], atol=1e-12)


@pytest.mark.parametrize("target", [(2, 2), (3, 3), (5, 5), (2, 3)])
def test_dpe_matches_direct_bilinear(target):
    g = np.random.default_rng(1).standard_normal((4, 4, 3))
    np.testing.assert_allclose(interpolate_pos_embed(g, target), bilinear_align_corners(g, *target), atol=1e-12)


def test_bicubic_reproduces_constants_and_identity():
    g = np.random.default_rng(2).standard_normal((4, 4, 2))
    np.testing.assert_allclose(interpolate_pos_embed(g, 4, "bicubic"), g)
    np.testing.assert_allclose(interpolate_pos_embed(np.ones((4, 4, 1)), 3, "bicubic"), 1.0, atol=1e-12)


def test_token_count_law_and_attention_rows():
    model = ViT(tiny(depth=2, size=16), rng=np.random.default_rng(0))
    for s in (16, 12, 8, 4):
        out = model.forward(np.random.default_rng(s).standard_normal((3, s, s, 3)), want_attention=True)
        n = (s // 4) ** 2
        assert out.tokens.shape == (3, n + 1, 8)
        assert out.patches.shape == (3, n, 8) and out.cls.shape == (3, 8)
        assert len(out.attention) == 2
        for a in out.attention:
            assert a.shape == (3, 2, n + 1, n + 1)
            np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-5)


def test_view_larger_than_config_rejected():
    model = ViT(tiny(), rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((1, 12, 12, 3)))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((1, 6, 6, 3)))


def test_full_size_view_uses_stored_grid():
    model = ViT(tiny(), rng=np.random.default_rng(0))
    assert model._pos_embed((2, 2)) is model.params["pos_embed"]


def test_zero_residual_branches_give_normed_embedding():
    cfg = tiny(depth=2)
    params = init_weights(cfg, "truncated-normal", np.random.default_rng(0))
    for k in params:
        if k.startswith("blocks.") and (".attn." in k or ".mlp." in k):
            params[k] = np.zeros_like(params[k])
    model = ViT(cfg, params=params)
    x = np.random.default_rng(1).standard_normal((2, 8, 8, 3))
    with T.no_grad():
        out = model.forward(x).tokens.data
        emb = T.layer_norm(model.embed(x), model.params["norm.gain"], model.params["norm.bias"]).data
    np.testing.assert_allclose(out, emb, atol=1e-12)


def test_batch_permutation_equivariance():
    model = ViT(tiny(depth=2), rng=np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((5, 8, 8, 3))
    perm = np.array([3, 0, 4, 1, 2])
    a = model.forward(x).tokens.data
    b = model.forward(x[perm]).tokens.data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_cls_invariant_to_joint_patch_and_position_shuffle():
    cfg = tiny(depth=2, size=12)
    params = init_weights(cfg, "truncated-normal", np.random.default_rng(0))
    params["pos_embed"] = np.random.default_rng(5).standard_normal(params["pos_embed"].shape)
    x = np.random.default_rng(1).standard_normal((2, 12, 12, 3))
    perm = np.random.default_rng(2).permutation(cfg.num_patches)
    shuffled = unpatchify(patchify(x, 4)[:, perm], 4, 12, 12)
    params2 = dict(params)
    params2["pos_embed"] = np.concatenate([params["pos_embed"][:1], params["pos_embed"][1:][perm]])
    a = ViT(cfg, params=params).forward(x).cls.data
    b = ViT(cfg, params=params2).forward(shuffled).cls.data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_table1_parameter_count_near_reported():
    cfg = ViTConfig(image_size=(32, 32), patch_size=4, depth=9, dim=192, heads=12, mlp_ratio=2)
    n = parameter_count(cfg)
    assert abs(n - 2.8e6) / 2.8e6 <= 0.05
    model = ViT(tiny(depth=3, dim=16, heads=4, size=16), rng=np.random.default_rng(0))
    assert model.num_params() == parameter_count(model.config)


def test_init_schemes_bounds_and_determinism():
    cfg = ViTConfig(image_size=(32, 32), patch_size=4, depth=1, dim=192, heads=12)
    for scheme, bound in (("uniform", 0.05), ("xavier", math.sqrt(6 / 384)), ("truncated-normal", 0.04)):
        p = init_weights(cfg, scheme, np.random.default_rng(7))
        w = p["blocks.0.attn.proj.weight"]
        assert np.abs(w).max() <= bound + 1e-7
        assert np.abs(w).max() > 0.9 * bound
        q = init_weights(cfg, scheme, np.random.default_rng(7))
        assert all(np.array_equal(p[k], q[k]) for k in p)
        assert np.abs(p["cls_token"]).max() <= 0.04 + 1e-7
        assert np.all(p["norm.gain"] == 1) and np.all(p["norm.bias"] == 0)
    assert abs(math.sqrt(6 / 384) - 0.125) < 1e-12
    with pytest.raises(ParameterError):
        init_weights(cfg, "orthogonal", np.random.default_rng(0))


def test_truncated_normal_stats():
    x = truncated_normal(np.random.default_rng(0), (200_000,))
    assert np.abs(x).max() <= 0.04
    # variance of a +-2 sigma truncated normal is about 0.774 sigma^2
    assert abs(x.std() / 0.02 - math.sqrt(0.7737)) < 0.01


def test_eval_forward_is_deterministic_and_dropout_only_in_train():
    model = ViT(tiny(dropout=0.3, attn_dropout=0.2), rng=np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 8, 8, 3))
    a, b = model.forward(x).cls.data, model.forward(x).cls.data
    assert np.array_equal(a, b)
    c = model.forward(x, train=True, rng=np.random.default_rng(3)).cls.data
    assert not np.allclose(a, c)


@pytest.mark.parametrize("seed", range(3))
def test_vit_gradient_f64(seed):
    assert vit_gradcheck(seed, np.float64) <= FD_TOL[np.float64]


@pytest.mark.parametrize("seed", range(3))
def test_vit_gradient_f32(seed):
    assert vit_gradcheck(seed, np.float32) <= FD_TOL[np.float32]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 8, 12]))
def test_attention_rows_stochastic_property(seed, size):
    model = ViT(tiny(depth=1, size=12, dtype="float32"), rng=np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).standard_normal((2, size, size, 3)) * 3
    out = model.forward(x, want_attention=True)
    np.testing.assert_allclose(out.attention[0].sum(-1), 1.0, atol=1e-5)
