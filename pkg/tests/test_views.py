import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitsmall.rng import stream
from vitsmall.views import (AugmentConfig, ViewConfig, augment, color_jitter, crop_resize, gaussian_blur,
                            generate_batch, generate_views, grayscale, hflip, hsv_to_rgb, random_resized_crop,
                            rgb_to_hsv, sample_crop_box, solarize)


def img(seed=0, h=32, w=32):
    return np.random.default_rng(seed).random((h, w, 3))


def test_full_area_crop_is_identity():
    x = img()
    for s in range(5):
        v = random_resized_crop(x, (1.0, 1.0), 32, np.random.default_rng(s))
        np.testing.assert_allclose(v, x, atol=1e-12)


def test_crop_output_sizes():
    x = img()
    rng = np.random.default_rng(0)
    assert random_resized_crop(x, (0.7, 1.0), 32, rng).shape == (32, 32, 3)
    assert random_resized_crop(x, (0.2, 0.5), 16, rng).shape == (16, 16, 3)


def test_crop_area_law_monte_carlo():
    rng = np.random.default_rng(123)
    fracs = []
    for _ in range(10_000):
        top, left, h, w = sample_crop_box((32, 32), (0.2, 0.5), rng)
        assert 0 <= top and top + h <= 32 + 1e-9 and 0 <= left and left + w <= 32 + 1e-9
        fracs.append(h * w / 1024)
    fracs = np.array(fracs)
    assert abs(fracs.mean() - 0.35) <= 0.01
    assert ((fracs >= 0.2 - 1e-12) & (fracs <= 0.5 + 1e-12)).all()


def test_crop_aspect_ratio_range():
    rng = np.random.default_rng(5)
    for _ in range(2000):
        _, _, h, w = sample_crop_box((32, 32), (0.2, 0.5), rng)
        assert 3 / 4 - 1e-9 <= w / h <= 4 / 3 + 1e-9


def test_degenerate_crop_falls_back_to_centre_square():
    # ratios far from square cannot fit at full area, forcing the fallback
    box = sample_crop_box((32, 32), (1.0, 1.0), np.random.default_rng(0), ratio=(3.0, 4.0))
    assert box == (0.0, 0.0, 32.0, 32.0)


def test_crop_resize_of_constant_is_constant():
    x = np.full((32, 32, 3), 0.3)
    np.testing.assert_allclose(crop_resize(x, (3.2, 5.7, 11.3, 14.9), 16), 0.3, atol=1e-12)


def test_all_probabilities_zero_is_identity():
    x = img()
    np.testing.assert_array_equal(augment(x, np.random.default_rng(0), AugmentConfig.off()), x)


def test_flip_involution_and_solarize_identity():
    x = img()
    np.testing.assert_array_equal(hflip(hflip(x)), x)
    np.testing.assert_array_equal(solarize(x, 1.0), x)
    s = solarize(np.array([[[0.2, 0.5, 0.9]]]), 0.5)
    np.testing.assert_allclose(s, [[[0.2, 0.5, 0.1]]])


def test_grayscale_channels_equal():
    g = grayscale(img())
    assert np.array_equal(g[..., 0], g[..., 1]) and np.array_equal(g[..., 1], g[..., 2])


def test_hsv_round_trip():
    x = img(3)
    np.testing.assert_allclose(hsv_to_rgb(rgb_to_hsv(x)), x, atol=1e-12)


def test_gaussian_blur_preserves_constants_and_mean_mass():
    np.testing.assert_allclose(gaussian_blur(np.full((16, 16, 3), 0.4), 1.5), 0.4, atol=1e-12)
    x = img(4, 16, 16)
    y = gaussian_blur(x, 0.8)
    assert y.std() < x.std()
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


def test_jitter_stays_in_range():
    rng = np.random.default_rng(0)
    for s in range(20):
        y = color_jitter(img(s), rng)
        assert y.min() >= 0 and y.max() <= 1


def test_presets_and_area_ratio():
    c = ViewConfig.cifar()
    assert c.local_scale == (0.2, 0.5) and c.global_scale == (0.7, 1.0)
    assert (c.global_size, c.local_size) == (32, 16)
    t = ViewConfig.tiny_imagenet()
    assert t.local_scale == (0.2, 0.4) and t.global_scale == (0.5, 1.0)
    assert (t.global_size, t.local_size) == (64, 32)
    for cfg in (c, t, ViewConfig.for_image_size(32), ViewConfig.for_image_size(64)):
        assert cfg.local_size * 2 == cfg.global_size
        assert (cfg.n_global, cfg.n_local) == (2, 8)


def test_view_config_validation():
    with pytest.raises(ValueError):
        ViewConfig(global_size=32, local_size=12)
    with pytest.raises(ValueError):
        ViewConfig(local_scale=(0.5, 0.2))
    with pytest.raises(ValueError):
        ViewConfig(global_scale=(0.0, 1.0))


def test_generate_views_counts_sizes_and_determinism():
    x = img()
    cfg = ViewConfig.cifar()
    a = generate_views(x, cfg, stream(0, "views", 0, 7))
    b = generate_views(x, cfg, stream(0, "views", 0, 7))
    assert len(a.globals) == 2 and len(a.locals) == 8
    assert all(v.shape == (32, 32, 3) for v in a.globals)
    assert all(v.shape == (16, 16, 3) for v in a.locals)
    for u, v in zip(a.globals + a.locals, b.globals + b.locals):
        assert np.array_equal(u, v)
    c = generate_views(x, cfg, stream(0, "views", 1, 7))
    assert not np.array_equal(a.globals[0], c.globals[0])


def test_generate_batch_independent_of_batch_composition():
    imgs = np.stack([img(s) for s in range(4)])
    cfg = ViewConfig.cifar()
    g, l = generate_batch(imgs, [10, 11, 12, 13], cfg, seed=3, epoch=2)
    assert g.shape == (2, 4, 32, 32, 3) and l.shape == (8, 4, 16, 16, 3)
    g2, l2 = generate_batch(imgs[2:], [12, 13], cfg, seed=3, epoch=2)
    assert np.array_equal(g[:, 2:], g2) and np.array_equal(l[:, 2:], l2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_views_stay_in_range(seed):
    x = np.random.default_rng(seed).random((32, 32, 3))
    vb = generate_views(x, ViewConfig.cifar(), np.random.default_rng(seed))
    for v in vb.globals + vb.locals:
        assert v.min() >= 0.0 and v.max() <= 1.0


def test_normalized_views_use_given_stats():
    x = np.full((32, 32, 3), 0.5)
    mean, std = np.array([0.5, 0.4, 0.3]), np.array([0.25, 0.2, 0.1])
    vb = generate_views(x, ViewConfig.cifar(global_augs=[AugmentConfig.off()] * 2, local_aug=AugmentConfig.off()),
                        np.random.default_rng(0), mean, std)
    np.testing.assert_allclose(vb.globals[0][0, 0], (0.5 - mean) / std, rtol=1e-6)
