import json

import numpy as np
import pytest
from scipy.stats import chisquare

from flexroi.errors import GenerationError, ParameterError, PersistedStateError
from flexroi.synthgen import (SynthConfig, blur_image, blur_scene, build_dataset, class_histogram, load_dataset,
                              make_scenes, synth_scene)


def test_same_seed_same_scene():
    a, b = synth_scene(11), synth_scene(11)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.annotations == b.annotations
    assert synth_scene(12).image.tobytes() != a.image.tobytes()


def test_single_object():
    assert len(synth_scene(3, n_objects=1).annotations) == 1


def test_empty_scene_allowed():
    scene = synth_scene(3, n_objects=0)
    assert scene.annotations == [] and scene.boxes.shape == (0, 4)


@pytest.mark.parametrize("seed", range(20))
def test_annotations_inside_image(seed):
    cfg = SynthConfig()
    scene = synth_scene(seed, cfg)
    assert scene.image.shape == (3, cfg.image_size, cfg.image_size)
    assert np.all((scene.image >= 0) & (scene.image <= 1))
    for ann in scene.annotations:
        x, y, w, h = ann.box
        assert w > 0 and h > 0 and x >= 0 and y >= 0
        assert x + w <= cfg.image_size and y + h <= cfg.image_size
        assert 0 <= ann.label < cfg.num_classes


def test_objects_do_not_overlap():
    scene = synth_scene(5, n_objects=8)
    boxes = scene.boxes
    for i in range(len(boxes)):
        for j in range(i):
            a, b = boxes[i], boxes[j]
            assert not (a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3])


def test_infeasible_placement():
    cfg = SynthConfig(image_size=64, min_scale=60, max_scale=64, max_retries=5)
    with pytest.raises(GenerationError):
        synth_scene(0, cfg, n_objects=3)


def test_class_histogram_is_uniform():
    # 1000 scenes of 1-8 objects; proportions within 5 points of 1/K and no chi-square rejection
    counts = class_histogram(make_scenes(1000, 0), 6)
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 1 / 6) <= 0.05)
    assert chisquare(counts).pvalue > 0.01


@pytest.mark.parametrize("bad", [0, 2, 4, -1])
def test_even_or_nonpositive_kernel(bad):
    with pytest.raises(ParameterError):
        blur_image(np.zeros((3, 8, 8)), bad)


def test_kernel_one_is_identity():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    np.testing.assert_array_equal(blur_image(img, 1), img)


@pytest.mark.parametrize("size", [3, 5, 9, 21])
def test_constant_image_unchanged(size):
    img = np.full((3, 24, 24), 0.37)
    np.testing.assert_allclose(blur_image(img, size), img, atol=1e-15)


def test_delta_gives_plateau():
    img = np.zeros((1, 9, 9))
    img[0, 4, 4] = 1.0
    out = blur_image(img, 3)
    expected = np.zeros((1, 9, 9))
    expected[0, 3:6, 3:6] = 1 / 9
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_blur_is_linear():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 3, 20, 20))
    lhs = blur_image(0.3 * a - 1.7 * b, 5)
    np.testing.assert_allclose(lhs, 0.3 * blur_image(a, 5) - 1.7 * blur_image(b, 5), atol=1e-10)


def test_blur_preserves_mean_with_periodic_border():
    img = np.random.default_rng(2).uniform(size=(3, 32, 32))
    assert abs(blur_image(img, 9, mode="wrap").mean() - img.mean()) <= 1e-6


def test_blur_keeps_annotations():
    scene = synth_scene(4)
    blurred = blur_scene(scene, 9)
    assert blurred.annotations == scene.annotations
    assert blurred.blur == 9


def test_empty_dataset(tmp_path):
    doc = build_dataset(0, 1, 0, tmp_path / "d")
    assert doc["count"] == 0
    data = load_dataset(tmp_path / "d")
    assert len(data) == 0
    assert json.loads((tmp_path / "d" / "index.json").read_text())["scenes"] == []


def test_dataset_is_reproducible(tmp_path):
    cfg = SynthConfig(image_size=64, max_objects=3, min_scale=8, max_scale=24)
    a = build_dataset(4, 3, 9, tmp_path / "a", cfg)
    b = build_dataset(4, 3, 9, tmp_path / "b", cfg)
    assert a["digest"] == b["digest"]
    assert (tmp_path / "a" / "index.json").read_bytes() == (tmp_path / "b" / "index.json").read_bytes()


def test_stored_images_equal_blurred_originals(tmp_path):
    cfg = SynthConfig(image_size=64, max_objects=3, min_scale=8, max_scale=24)
    build_dataset(100, 9, 2, tmp_path / "d", cfg)
    data = load_dataset(tmp_path / "d")
    for stored, clean in zip(data.scenes, make_scenes(100, 2, cfg, blur=1)):
        np.testing.assert_array_equal(stored.image, blur_image(clean.image, 9))
        assert stored.annotations == clean.annotations


def test_missing_dataset(tmp_path):
    with pytest.raises(PersistedStateError):
        load_dataset(tmp_path / "nope")


def test_failed_write_leaves_nothing(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PersistedStateError):
        build_dataset(2, 1, 0, blocker / "sub")
    assert blocker.read_text() == "x"
