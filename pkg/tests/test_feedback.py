import math

import numpy as np
import pytest

from flexroi import feedback as fb
from flexroi import numerics as nx
from flexroi.errors import ConfigurationError, DegenerateWeightsError, ParameterError, ShapeError
from flexroi.numerics import Tensor
from flexroi.preclass import gaussian_weights, init_head, one_hot_levels
from flexroi.pyramid import PyramidConfig, build_pyramid, init_pyramid

PHI = np.array([0.1, 0.2, 0.4, 0.2, 0.1])


@pytest.mark.parametrize("i,expected", [(1, 8), (2, 16), (3, 16), (5, 16)])
def test_projection_channels(i, expected):
    assert fb.projection_channels(256, 5, i) == expected


@pytest.mark.parametrize("c0,n", [(64, 5), (32, 5), (16, 3), (128, 4)])
def test_projection_channels_saturate(c0, n):
    chans = [fb.projection_channels(c0, n, i) for i in range(1, n + 1)]
    assert len(set(chans[1:])) == 1 and chans[1] == 2 * chans[0]


def test_projection_channels_need_divisibility():
    with pytest.raises(ConfigurationError):
        fb.projection_channels(48, 5, 1)


@pytest.mark.parametrize("n,m", [(2, 3), (3, 3), (4, 5), (5, 5), (6, 7)])
def test_kernel_size(n, m):
    assert fb.kernel_size(n) == m


# ---------------------------------------------------------------- image feedback
def _tiny_pyramid(batch=None, seed=0):
    cfg = PyramidConfig(levels=3, channels=8)
    rng = np.random.default_rng(seed)
    shape = (3, 32, 32) if batch is None else (batch, 3, 32, 32)
    pyr = build_pyramid(rng.uniform(size=shape), init_pyramid(rng, cfg), cfg)
    return pyr, fb.init_image_feedback(rng, 8, 3)


def test_image_feedback_shape_and_sign():
    pyr, params = _tiny_pyramid()
    phi = fb.image_feedback(pyr, params)
    assert phi.shape == (3,) and np.all(phi.data >= 0) and np.all(np.isfinite(phi.data))
    pyr, params = _tiny_pyramid(batch=2)
    assert fb.image_feedback(pyr, params).shape == (2, 3)


def test_image_feedback_deterministic():
    pyr, params = _tiny_pyramid(seed=3)
    np.testing.assert_array_equal(fb.image_feedback(pyr, params).data, fb.image_feedback(pyr, params).data)


def test_image_feedback_target_too_small():
    cfg = PyramidConfig(levels=3, channels=8, stem_stride=1)
    rng = np.random.default_rng(0)
    pyr = build_pyramid(rng.uniform(size=(3, 6, 6)), init_pyramid(rng, cfg), cfg)
    with pytest.raises(ConfigurationError):
        fb.image_feedback(pyr, fb.init_image_feedback(rng, 8, 3))


# ---------------------------------------------------------------- class feedback
def _mlp(out_dim, seed=0):
    return fb.init_mlp(np.random.default_rng(seed), "cls_fb", 4, 6, out_dim)


def test_class_feedback_shape_and_sign():
    probs = nx.softmax(np.random.default_rng(0).standard_normal((7, 4))).data
    phi = fb.class_feedback(probs, _mlp(5))
    assert phi.shape == (7, 5) and np.all(phi.data >= 0)


def test_class_feedback_is_a_pure_function_of_probs():
    p = nx.softmax(np.array([0.3, -1.0, 2.0, 0.0])).data
    phi = fb.class_feedback(np.stack([p, p]), _mlp(5)).data
    np.testing.assert_array_equal(phi[0], phi[1])


@pytest.mark.parametrize("bad", [[0.5, 0.5, 0.5, 0.0], [1.2, -0.2, 0.0, 0.0], [2.0, 1.0, 0.5, 0.1]])
def test_class_feedback_rejects_unnormalised_input(bad):
    with pytest.raises(ParameterError):
        fb.class_feedback(np.array(bad), _mlp(5))


def test_direct_weights_are_area_blind():
    p = nx.softmax(np.array([0.3, -1.0, 2.0, 0.0])).data
    w = fb.direct_cls_weights(np.stack([p, p]), _mlp(5)).data
    assert w.shape == (2, 5) and np.all(w >= 0)
    np.testing.assert_array_equal(w[0], w[1])


def test_gaussian_kernel_reduces_to_pre_weights():
    w = fb.gaussian_kernel_weights(np.array([3.0, 2.4]), np.full(2, math.sqrt(2) / 2), 5).data
    np.testing.assert_allclose(w, gaussian_weights([3.0, 2.4], math.sqrt(2) / 2, 5), atol=1e-15)


def test_gaussian_cls_weights_positive_and_symmetric():
    params = _mlp(2)
    params["cls_fb.fc2.weight"].data[...] = 0.0
    params["cls_fb.fc2.bias"].data[...] = [0.0, 0.3]
    p = nx.softmax(np.zeros((1, 4))).data
    w = fb.gaussian_cls_weights(p, [3.0], params, 5).data[0]
    assert np.all(w > 0)
    np.testing.assert_allclose(w, w[::-1], rtol=1e-14)


# ---------------------------------------------------------------- interpolation
def test_integer_level_reads_knots():
    np.testing.assert_allclose(fb.interpolate_cls_weights(PHI, 3.0, 5).data, PHI, atol=1e-15)


def test_half_level_case():
    np.testing.assert_allclose(fb.interpolate_cls_weights(PHI, 3.5, 5).data, [0, 0.15, 0.3, 0.3, 0.15], atol=1e-15)


@pytest.mark.parametrize("i", [1.0, 1.7, 2.5, 3.0, 4.25, 5.0])
def test_constant_kernel(i):
    w = fb.interpolate_cls_weights(np.full(5, 0.7), i, 5).data
    k = np.arange(1, 6)
    inside = np.abs(k - i) <= 2
    np.testing.assert_allclose(w[inside], 0.7, atol=1e-15)
    assert np.all(w[~inside] == 0)


@pytest.mark.parametrize("levels", [3, 4, 5, 6])
def test_window_zeros(levels):
    rng = np.random.default_rng(levels)
    m, half = fb.kernel_size(levels), levels // 2
    i = rng.uniform(1, levels, 1000)
    phi = rng.uniform(0.01, 3, (1000, m))
    w = fb.interpolate_cls_weights(phi, i, levels).data
    k = np.arange(1, levels + 1)
    outside = np.abs(k[None] - i[:, None]) > half
    assert np.all(w[outside] == 0)
    assert np.all(w[~outside] > 0)


@pytest.mark.parametrize("i", [1, 2, 3, 4, 5])
def test_knot_consistency(i):
    phi = np.random.default_rng(i).uniform(size=5)
    w = fb.interpolate_cls_weights(phi, float(i), 5).data
    for k in range(max(1, i - 2), min(5, i + 2) + 1):
        assert w[k - 1] == phi[k - i + 2]


def test_piecewise_linear_in_level():
    phi = np.random.default_rng(9).uniform(size=5)
    grid = np.linspace(1, 5, 801)
    w = fb.interpolate_cls_weights(np.tile(phi, (len(grid), 1)), grid, 5).data
    for k in range(1, 6):
        for i, wk in zip(grid, w[:, k - 1]):
            j = k - i + 2
            if not 0 <= j <= 4:
                expected = 0.0
            else:
                lo = min(int(math.floor(j)), 3)
                expected = phi[lo] + (j - lo) * (phi[lo + 1] - phi[lo])
            assert wk == pytest.approx(expected, abs=1e-12)


def test_interpolation_shape_mismatch():
    with pytest.raises(ShapeError):
        fb.interpolate_cls_weights(np.ones(4), 3.0, 5)


# ---------------------------------------------------------------- combine and refine
def test_combine_with_unit_image_feedback():
    w = np.random.default_rng(0).uniform(size=(3, 5))
    np.testing.assert_array_equal(fb.combine_weights(np.ones(5), w).data, w)


def test_combine_one_hot():
    phi = np.array([0.5, 1.1, 0.9, 1.3, 0.7])
    np.testing.assert_array_equal(fb.combine_weights(phi, one_hot_levels(4, 5)).data, [0, 0, 0, 1.3, 0])


def test_combine_matches_loop():
    rng = np.random.default_rng(1)
    phi, w = rng.uniform(size=(4, 5)), rng.uniform(size=(4, 5))
    out = fb.combine_weights(phi, w).data
    for r in range(4):
        for k in range(5):
            assert out[r, k] == phi[r, k] * w[r, k]


def _refine_setup(seed=0, r=3):
    rng = np.random.default_rng(seed)
    feats = [Tensor(rng.standard_normal((r, 2, 3, 3))) for _ in range(5)]
    params = init_head(rng, "refine.0", 18, 8, 4, regression=False)
    return rng, feats, params


@pytest.mark.parametrize("k", range(5))
def test_refine_one_hot_picks_level(k):
    rng, feats, params = _refine_setup(k)
    phi = rng.uniform(0.2, 2.0, 5)
    w = fb.combine_weights(phi, np.tile(one_hot_levels(k + 1, 5), (3, 1)))
    f, _ = fb.refine(feats, w, params)
    np.testing.assert_allclose(f.data, feats[k].data, atol=1e-15)


@pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
def test_refine_scale_invariance(c):
    rng, feats, params = _refine_setup(4)
    w = rng.uniform(0.1, 1.0, (3, 5))
    f1, z1 = fb.refine(feats, w, params)
    f2, z2 = fb.refine(feats, c * w, params)
    np.testing.assert_allclose(f2.data, f1.data, atol=1e-10)
    np.testing.assert_allclose(z2.data, z1.data, atol=1e-10)


def test_image_feedback_scale_leaves_refine_unchanged():
    rng, feats, params = _refine_setup(5)
    phi, cls = rng.uniform(0.5, 1.5, 5), rng.uniform(0.1, 1.0, (3, 5))
    _, z1 = fb.refine(feats, fb.combine_weights(phi, cls), params)
    _, z2 = fb.refine(feats, fb.combine_weights(7.5 * phi, cls), params)
    np.testing.assert_allclose(z2.data, z1.data, atol=1e-10)


def test_refine_matches_loop():
    rng, feats, params = _refine_setup(6)
    w = rng.uniform(0.1, 1.0, (3, 5))
    f, _ = fb.refine(feats, w, params)
    for r in range(3):
        expected = sum(w[r, k] * feats[k].data[r] for k in range(5)) / w[r].sum()
        np.testing.assert_allclose(f.data[r], expected, atol=1e-13)


def test_refine_degenerate():
    _, feats, params = _refine_setup(7)
    w = np.ones((3, 5))
    w[1] = 0.0
    with pytest.raises(DegenerateWeightsError):
        fb.refine(feats, w, params)
    _, _, mask = fb.refine(feats, w, params, on_degenerate="mask")
    assert mask.tolist() == [False, True, False]


def test_feedback_gradients_reach_the_image():
    cfg = PyramidConfig(levels=3, channels=8)
    rng = np.random.default_rng(11)
    image = Tensor(rng.uniform(size=(3, 32, 32)))
    params = dict(init_pyramid(rng, cfg), **fb.init_image_feedback(rng, 8, 3))
    params.update(fb.init_mlp(rng, "cls_fb", 4, 6, 3))
    params.update(init_head(rng, "refine.0", 8 * 4, 6, 4, regression=False))
    rois = np.array([[4.0, 6.0, 14.0, 10.0]])
    probs = nx.softmax(rng.standard_normal((1, 4))).data

    def loss():
        pyr = build_pyramid(image, params, cfg)
        feats = [nx.roi_align(lvl, rois, pyr.scale(k), 2) for k, lvl in enumerate(pyr.levels)]
        phi_img = fb.image_feedback(pyr, params)
        w_cls = fb.interpolate_cls_weights(fb.class_feedback(probs, params), [1.6], 3)
        _, logits = fb.refine(feats, fb.combine_weights(phi_img, w_cls), params)
        return nx.softmax_cross_entropy(logits, [2])

    errs = nx.finite_diff_check(loss, dict(params, image=image), max_coords=12, seed=0)
    assert max(v for k, v in errs.items() if k != "__tolerance__") <= 1e-4
