import numpy as np
import pytest
from scipy import ndimage

from flexroi import numerics as nx
from flexroi.errors import ConfigurationError, ParameterError
from flexroi.numerics import Tensor
from flexroi.pyramid import (PyramidConfig, RoI, build_pyramid, check_image_size, init_pyramid, level_extents,
                             pool_all_levels, roi_pool)


def _params(config, seed=0):
    return init_pyramid(np.random.default_rng(seed), config)


def test_default_level_shapes():
    cfg = PyramidConfig()
    pyr = build_pyramid(np.zeros((3, 256, 256)), _params(cfg), cfg)
    assert pyr.shapes == [(64, 128, 128), (64, 64, 64), (64, 32, 32), (64, 16, 16), (64, 8, 8)]
    assert level_extents(256, 256, cfg) == [(128, 128), (64, 64), (32, 32), (16, 16), (8, 8)]


@pytest.mark.parametrize("h,w", [(64, 64), (100, 77), (129, 255), (33, 40)])
def test_extents_halve_with_ceiling(h, w):
    cfg = PyramidConfig(levels=4, channels=4)
    ext = level_extents(h, w, cfg)
    assert ext[0] == (-(-h // 2), -(-w // 2))
    for (ph, pw), (ch, cw) in zip(ext, ext[1:]):
        assert (ch, cw) == (-(-ph // 2), -(-pw // 2))
        assert ch >= 1 and cw >= 1
    pyr = build_pyramid(np.zeros((3, h, w)), _params(cfg), cfg)
    assert [s[1:] for s in pyr.shapes] == ext


def test_zero_image_zero_bias_gives_zero_pyramid():
    cfg = PyramidConfig(levels=3, channels=8)
    pyr = build_pyramid(np.zeros((3, 32, 32)), _params(cfg), cfg)
    assert all(np.all(level.data == 0) for level in pyr.levels)


def test_identical_images_identical_pyramids():
    cfg = PyramidConfig(levels=3, channels=8)
    img = np.random.default_rng(0).uniform(size=(3, 32, 32))
    params = _params(cfg)
    batch = build_pyramid(np.stack([img, img]), params, cfg)
    for level in batch.levels:
        np.testing.assert_array_equal(level.data[0], level.data[1])


def test_image_too_small():
    with pytest.raises(ConfigurationError):
        check_image_size(16, 64, PyramidConfig())


def test_roi_extents_validated():
    with pytest.raises(ParameterError):
        RoI(0, 0, 0, 5)


def test_constant_map_pools_constant():
    feat = np.full((2, 10, 12), 0.7)
    out = roi_pool(feat, RoI(3.0, 2.5, 9.0, 11.0), k=0, size=7)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-14)


def test_single_cell_roi():
    feat = np.random.default_rng(1).standard_normal((3, 8, 8))
    # level k=1 with stem 2: one cell spans 4 image pixels
    out = roi_pool(feat, RoI(5 * 4.0, 2 * 4.0, 4.0, 4.0), k=1, size=1)
    np.testing.assert_allclose(out.data[0, :, 0, 0], feat[:, 2, 5], atol=1e-14)


def test_roi_outside_map_pools_zero():
    feat = np.ones((2, 8, 8))
    out = roi_pool(feat, RoI(500.0, 500.0, 20.0, 20.0), k=0, size=3)
    assert np.all(out.data == 0)


@pytest.mark.parametrize("seed", range(10))
def test_matches_bilinear_oracle(seed):
    rng = np.random.default_rng(seed)
    feat = rng.standard_normal((3, 12, 14))
    scale = 0.5
    # keep every sample inside the map so no border rule applies
    x, w = rng.uniform(1, 8), rng.uniform(2, 16)
    y, h = rng.uniform(1, 6), rng.uniform(2, 14)
    size = 5
    out = nx.roi_align(feat, [[x, y, w, h]], scale, size).data[0]
    frac = (np.arange(size) + 0.5) / size
    ys = (y + frac * h) * scale - 0.5
    xs = (x + frac * w) * scale - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    assert gy.min() >= 0 and gy.max() <= 11 and gx.min() >= 0 and gx.max() <= 13
    for c in range(3):
        expected = ndimage.map_coordinates(feat[c], [gy.ravel(), gx.ravel()], order=1).reshape(size, size)
        np.testing.assert_allclose(out[c], expected, atol=1e-12)


def test_pooling_is_linear_in_features():
    rng = np.random.default_rng(2)
    feat = rng.standard_normal((2, 9, 9))
    rois = np.array([[1.0, 2.0, 7.5, 9.0], [-3.0, 4.0, 10.0, 6.0]])
    a = roi_pool(feat, rois, k=0, size=4).data
    b = roi_pool(-2.5 * feat, rois, k=0, size=4).data
    np.testing.assert_allclose(b, -2.5 * a, atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_pool_gradient(seed):
    rng = np.random.default_rng(seed)
    feat = Tensor(rng.standard_normal((2, 7, 7)))
    rois = np.array([[rng.uniform(-4, 10), rng.uniform(-4, 10), rng.uniform(2, 14), rng.uniform(2, 14)]])
    mix = rng.standard_normal((1, 2, 3, 3))
    errs = nx.finite_diff_check(lambda: nx.sum(roi_pool(feat, rois, k=0, size=3) * Tensor(mix)), [feat])
    assert max(v for k, v in errs.items() if k != "__tolerance__") <= 1e-4


def test_pool_all_levels_uses_level_scale():
    cfg = PyramidConfig(levels=3, channels=2)
    pyr = build_pyramid(np.random.default_rng(3).uniform(size=(3, 32, 32)), _params(cfg), cfg)
    rois = np.array([[4.0, 4.0, 16.0, 12.0]])
    pooled = pool_all_levels(pyr, rois, 3)
    for k, p in enumerate(pooled):
        np.testing.assert_array_equal(p.data, roi_pool(pyr[k], rois, k, 3, cfg.stem_stride).data)
