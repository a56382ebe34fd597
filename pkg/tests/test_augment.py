from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from geossl import augment as aug
from geossl.augment import AugmentationConfig
from geossl.data_ingest import ImageSample

IDENTITY = AugmentationConfig(hflip_p=0, vflip_p=0, rotation_range=(0, 0), grayscale_p=0, blur_p=0)


def sample(size=256, seed=0):
    rng = np.random.default_rng(seed)
    return ImageSample(rng.integers(0, 256, (size, size, 3), dtype=np.uint8), 0, Path("x.png"))


def test_default_config_is_valid():
    assert aug.validate_config(AugmentationConfig()) == []


def test_default_matches_table_values():
    cfg = AugmentationConfig()
    assert cfg.resize == (224, 224)
    assert (cfg.hflip_p, cfg.vflip_p, cfg.grayscale_p, cfg.blur_p) == (0.5, 0.5, 0.2, 0.51)
    assert cfg.rotation_range == (-90.0, 90.0)
    assert cfg.blur_kernel == 21


def test_even_kernel_reported():
    assert aug.validate_config(replace(AugmentationConfig(), blur_kernel=20)) == ["blur_kernel must be odd"]


def test_bad_probability_reported():
    problems = aug.validate_config(replace(AugmentationConfig(), hflip_p=1.5))
    assert len(problems) == 1 and "probability out of range" in problems[0]


def test_other_violations():
    cfg = replace(AugmentationConfig(), blur_kernel=1, rotation_range=(10, -10), rotation_fill="wrap")
    assert len(aug.validate_config(cfg)) == 3


def test_config_dict_round_trip():
    cfg = replace(AugmentationConfig(), resize=(64, 64))
    assert AugmentationConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        AugmentationConfig.from_dict({"colour_jitter": 0.8})


def test_default_views_shape_and_range():
    pair = aug.pretext_views(sample(256), AugmentationConfig(), rng_seed=1, source_index=3)
    assert pair.view_a.shape == pair.view_b.shape == (3, 224, 224)
    for v in (pair.view_a, pair.view_b):
        assert v.dtype == np.float32 and v.min() >= 0 and v.max() <= 1
    assert not np.array_equal(pair.view_a, pair.view_b)


def test_identity_chain():
    s = sample(256)
    pair = aug.pretext_views(s, IDENTITY, rng_seed=5)
    expected = aug.to_chw(aug.resize(s.pixels, (224, 224)))
    np.testing.assert_array_equal(pair.view_a, expected)
    np.testing.assert_array_equal(pair.view_b, expected)


def test_views_reproducible():
    s = sample(96)
    cfg = replace(AugmentationConfig(), resize=(64, 64))
    a = aug.pretext_views(s, cfg, 7, 11)
    b = aug.pretext_views(s, cfg, 7, 11)
    c = aug.pretext_views(s, cfg, 7, 12)
    assert np.array_equal(a.view_a, b.view_a) and np.array_equal(a.view_b, b.view_b)
    assert not np.array_equal(a.view_a, c.view_a)


def test_grayscale_branch_equal_channels():
    cfg = replace(IDENTITY, grayscale_p=1.0)
    v = aug.pretext_views(sample(64), replace(cfg, resize=(64, 64)), 0).view_a
    np.testing.assert_array_equal(v[0], v[1])
    np.testing.assert_array_equal(v[1], v[2])


@pytest.mark.parametrize("seed", range(20))
def test_random_chains_stay_in_range(seed):
    cfg = replace(AugmentationConfig(), resize=(48, 48), hflip_p=0.9, blur_p=0.9, grayscale_p=0.5)
    pair = aug.pretext_views(sample(64, seed), cfg, seed)
    for v in (pair.view_a, pair.view_b):
        assert v.shape == (3, 48, 48) and 0 <= v.min() and v.max() <= 1


def test_blur_preserves_mean_brightness():
    img = np.random.default_rng(0).random((128, 128, 3)).astype(np.float32)
    for sigma in (0.1, 1.0, 2.0):
        out = aug.gaussian_blur(img, 21, sigma)
        interior = (slice(10, -10), slice(10, -10))
        assert abs(out[interior].mean() - img[interior].mean()) < 0.01 * img[interior].mean()
    k = aug.gaussian_kernel(21, 1.3)
    assert k.sum() == pytest.approx(1.0, abs=1e-12)


def test_rotation_of_symmetric_image():
    # image invariant under quarter turns about its centre
    n = 64
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    img = np.repeat((np.cos(r2 / 60.0) * 0.5 + 0.5)[..., None], 3, axis=2).astype(np.float64)
    for angle in (90.0, -90.0):
        out = aug.rotate(img, angle)
        assert np.abs(out - img).mean() < 1e-6


def test_rotation_fill_modes_differ():
    img = np.random.default_rng(1).random((32, 32, 3))
    a = aug.rotate(img, 45, "reflect")
    b = aug.rotate(img, 45, "zero")
    assert b[0, 0].max() == 0.0
    assert a[0, 0].max() > 0.0


def test_downstream_eval_deterministic():
    s = sample(256)
    a = aug.downstream_transform(s, train_mode=False, rng_seed=1)
    b = aug.downstream_transform(s, train_mode=False, rng_seed=2)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 224, 224)


def test_downstream_train_crop():
    s = sample(256)
    outs = [aug.downstream_transform(s, True, rng_seed=k) for k in range(4)]
    assert all(o.shape == (3, 224, 224) for o in outs)
    assert any(not np.array_equal(outs[0], o) for o in outs[1:])
    np.testing.assert_array_equal(outs[0], aug.downstream_transform(s, True, rng_seed=0))


def test_downstream_small_input_upscaled():
    s = sample(64)
    assert aug.downstream_transform(s, True, 0).shape == (3, 224, 224)
    assert aug.downstream_transform(s, False, 0, size=96).shape == (3, 96, 96)


def test_channel_stats():
    imgs = [np.full((3, 4, 4), v, dtype=np.float32) for v in (0.2, 0.4)]
    mean, std = aug.channel_stats(imgs)
    np.testing.assert_allclose(mean, [0.3] * 3, atol=1e-7)
    np.testing.assert_allclose(std, [0.1] * 3, atol=1e-6)
