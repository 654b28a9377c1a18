from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_MODEL, tiny_train_config
from flexroi import numerics as nx
from flexroi.errors import ConfigurationError, FlexError, UsageError
from flexroi.evaluation import Detections, box_iou, class_ap, evaluate_detections, interpolated_ap
from flexroi.model import FlexModel, decode_boxes, encode_boxes, parse_ablation
from flexroi.numerics import Tensor
from flexroi.synthgen import Scene
from flexroi.trainer import (METRIC_COLUMNS, TrainConfig, evaluate, format_metrics, load_checkpoint, make_batch,
                             predict, save_checkpoint, total_loss, train)


# ---------------------------------------------------------------- average precision
def test_iou():
    assert box_iou([0, 0, 2, 2], [1, 1, 2, 2])[0, 0] == pytest.approx(1 / 7)
    assert box_iou([0, 0, 2, 2], [5, 5, 1, 1])[0, 0] == 0.0
    assert box_iou([3, 4, 5, 6], [3, 4, 5, 6])[0, 0] == 1.0


def test_hand_built_three_detection_fixture():
    # two ground truths; detections by score: hit, miss, hit
    gt = [np.array([[0, 0, 10, 10], [20, 20, 10, 10]], dtype=float)]
    labels = [np.array([0, 0])]
    det = Detections(np.array([[0, 0, 10, 10], [50, 50, 5, 5], [20, 20, 10, 10]], dtype=float),
                     np.array([0.9, 0.8, 0.7]), np.array([0, 0, 0]))
    # precision envelope: 1 up to recall 0.5, then 2/3 up to recall 1
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert class_ap([det], gt, labels, 0, 0.5) == pytest.approx(expected, abs=1e-12)
    assert interpolated_ap(np.array([1, 0, 1]), 2) == pytest.approx(expected, abs=1e-12)


def test_perfect_and_empty_detectors():
    rng = np.random.default_rng(0)
    boxes = [rng.uniform(0, 50, (4, 2)) for _ in range(3)]
    boxes = [np.hstack([b, np.full((4, 2), 8.0)]) for b in boxes]
    labels = [rng.integers(0, 3, 4) for _ in range(3)]
    perfect = [Detections(b, np.ones(len(b)), l) for b, l in zip(boxes, labels)]
    rep = evaluate_detections(perfect, boxes, labels, 3)
    assert rep.map == 1.0 and rep.ap50 == 1.0 and rep.ap75 == 1.0
    rep = evaluate_detections([Detections.empty() for _ in boxes], boxes, labels, 3)
    assert rep.map == 0.0


def test_map_is_mean_of_thresholds():
    gt = [np.array([[0, 0, 10, 10]], dtype=float)]
    det = [Detections(np.array([[1, 1, 10, 10]], dtype=float), np.array([1.0]), np.array([0]))]
    rep = evaluate_detections(det, gt, [np.array([0])], 2)
    assert rep.map == pytest.approx(np.mean(list(rep.per_threshold.values())))
    assert 0 <= rep.map <= 1 and rep.ap50 == 1.0 and rep.per_threshold[0.95] == 0.0


# ---------------------------------------------------------------- loss
def test_loss_composition():
    rng = np.random.default_rng(1)
    pre, ref, deltas = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    targets, labels = rng.standard_normal((3, 4)), np.array([0, 3, 1])
    parts = total_loss(Tensor(pre), [Tensor(ref)], Tensor(deltas), labels, targets, 0.5)
    reg = nx.smooth_l1(deltas, targets, beta=1.0).item()
    ce_pre = nx.softmax_cross_entropy(pre, labels).item()
    ce_ref = nx.softmax_cross_entropy(ref, labels).item()
    assert parts.total.item() == pytest.approx(reg + 0.5 * ce_pre + ce_ref, rel=1e-14)
    assert (parts.reg, parts.cls_pre, parts.cls_refine) == pytest.approx((reg, ce_pre, ce_ref))


def test_perfect_predictions_give_near_zero_loss():
    labels = np.array([2, 0])
    logits = Tensor(np.eye(3)[labels] * 60.0)
    parts = total_loss(logits, [logits], Tensor(np.zeros((2, 4))), labels, np.zeros((2, 4)), 0.5)
    assert parts.reg == 0.0 and parts.cls_pre < 1e-20 and parts.cls_refine < 1e-20


def test_gamma_zero_removes_pre_classification_gradient():
    rng = np.random.default_rng(2)
    pre = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    parts = total_loss(pre, [Tensor(rng.standard_normal((3, 4)))], Tensor(np.zeros((3, 4))), [0, 1, 2],
                       np.zeros((3, 4)), 0.0)
    parts.total.backward()
    assert np.all(pre.grad == 0)


def test_empty_batch_loss_is_zero():
    parts = total_loss(Tensor(np.zeros((0, 4))), [], Tensor(np.zeros((0, 4))), [], np.zeros((0, 4)), 0.5)
    assert parts.total.item() == 0.0


def test_box_encoding_roundtrip():
    rng = np.random.default_rng(3)
    props = np.hstack([rng.uniform(0, 50, (6, 2)), rng.uniform(4, 30, (6, 2))])
    gts = np.hstack([rng.uniform(0, 50, (6, 2)), rng.uniform(4, 30, (6, 2))])
    np.testing.assert_allclose(decode_boxes(props, encode_boxes(props, gts)), gts, atol=1e-10)
    assert np.all(encode_boxes(gts, gts) == 0)


# ---------------------------------------------------------------- model wiring
def test_ablation_parsing():
    assert parse_ablation("+cls+img") == "+cls+img"
    assert parse_ablation("multi-level,cls") == "+cls"
    assert parse_ablation("none") == "baseline"
    for bad in ("cls", "img", "multi-level+img", "foo"):
        with pytest.raises(UsageError):
            parse_ablation(bad)


def _batch(scenes, n=2):
    images, props, labels, gts, bidx = make_batch(scenes[:n], np.random.default_rng(0), 0.2, 1)
    return images, props, labels, gts, bidx


def _loss(model, batch):
    images, props, labels, gts, bidx = batch
    out = model.forward(images, props, bidx)
    return total_loss(out.pre_logits, out.refine_logits, out.deltas, labels, encode_boxes(props, gts),
                      model.config.gamma).total


def test_every_active_group_gets_gradient(tiny_scenes):
    model = FlexModel.initialize(TINY_MODEL, seed=0)
    # break the class feedback prior so its hidden layer sees gradient too
    rng = np.random.default_rng(0)
    w = model.params["cls_fb.0.fc2.weight"]
    w.data[...] = rng.standard_normal(w.shape) * 0.3
    _loss(model, _batch(tiny_scenes)).backward()
    groups = {}
    for name in model.active_parameter_names():
        g = model.params[name].grad
        groups.setdefault(name.split(".")[0], []).append(0.0 if g is None else float(np.abs(g).max()))
    assert set(groups) == {"backbone", "pre", "img", "cls_fb", "refine"}
    for group, values in groups.items():
        assert max(values) > 0, group
    dead = [n for n in model.active_parameter_names()
            if model.params[n].grad is None or not np.any(model.params[n].grad)]
    assert dead == []


def test_baseline_leaves_feedback_untouched(tiny_scenes):
    cfg = tiny_train_config(ablation="baseline")
    before = FlexModel.initialize(cfg.model, cfg.seed)
    after = train(cfg, tiny_scenes).model
    for name, t in before.params.items():
        if name.split(".")[0] in ("img", "cls_fb", "refine"):
            np.testing.assert_array_equal(after.params[name].data, t.data)
    assert "refine.0.fc.weight" not in after.active_parameter_names()


def test_baseline_ignores_feedback_parameters(tiny_scenes):
    model = FlexModel.initialize(replace(TINY_MODEL, ablation="baseline"), 0)
    images, props, _, _, bidx = _batch(tiny_scenes)
    a = model.forward(images, props, bidx).final_logits.data
    for name in model.params:
        if name.split(".")[0] in ("img", "cls_fb", "refine"):
            model.params[name].data[...] += 1.0
    np.testing.assert_array_equal(model.forward(images, props, bidx).final_logits.data, a)


def test_depth_zero_is_pre_classification(tiny_scenes):
    model = FlexModel.initialize(TINY_MODEL, 0)
    images, props, _, _, bidx = _batch(tiny_scenes)
    out = model.forward(images, props, bidx, depth=0)
    full = model.forward(images, props, bidx)
    assert out.refine_logits == []
    np.testing.assert_array_equal(out.final_logits.data, full.pre_logits.data)


# ---------------------------------------------------------------- training
def test_training_is_deterministic(tiny_scenes):
    cfg = tiny_train_config()
    a = format_metrics(train(cfg, tiny_scenes, tiny_scenes[:3]).rows)
    b = format_metrics(train(cfg, tiny_scenes, tiny_scenes[:3]).rows)
    assert a == b
    assert a.splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert len(a.splitlines()) == 3


def test_loss_decreases(tiny_scenes):
    rows = train(replace(tiny_train_config(), epochs=3), tiny_scenes).rows
    assert rows[-1]["loss_total"] < rows[0]["loss_total"]


def test_non_finite_input_aborts(tiny_scenes):
    bad = Scene(np.full_like(tiny_scenes[0].image, np.nan), tiny_scenes[0].annotations)
    with pytest.raises(FlexError) as info:
        train(tiny_train_config(), [bad])
    assert info.value.exit_code == 3


def test_empty_dataset_rejected():
    with pytest.raises(ConfigurationError):
        train(tiny_train_config(), [])


def test_class_count_mismatch(tiny_scenes):
    model = FlexModel.initialize(TINY_MODEL, 0)
    with pytest.raises(ConfigurationError):
        evaluate(model, tiny_scenes, num_classes=4)


def test_unknown_config_keys():
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epochs": 2, "momentum_typo": 0.9})
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"model": {"levels": 3, "widht": 2}})


def test_milestones_follow_epochs():
    assert TrainConfig(epochs=12).schedule == (8, 11)
    assert TrainConfig(epochs=24).schedule == (16, 22)


def test_checkpoint_roundtrip(tmp_path, tiny_scenes):
    cfg = tiny_train_config()
    model = train(cfg, tiny_scenes).model
    digest = save_checkpoint(tmp_path / "m.flxc", model, cfg)
    loaded, loaded_cfg, loaded_digest = load_checkpoint(tmp_path / "m.flxc")
    assert loaded_digest == digest and loaded_cfg == cfg
    a = predict(model, tiny_scenes[:3])
    b = predict(loaded, tiny_scenes[:3])
    np.testing.assert_array_equal(a.final_probs, b.final_probs)


def test_predict_emits_one_detection_per_class(tiny_scenes):
    model = FlexModel.initialize(TINY_MODEL, 0)
    preds = predict(model, tiny_scenes[:3])
    for det, scene in zip(preds.detections, tiny_scenes[:3]):
        assert len(det.scores) == len(scene.annotations) * TINY_MODEL.num_classes
    np.testing.assert_allclose(preds.final_probs.sum(axis=1), 1.0, atol=1e-12)
    assert preds.phi_img.shape == (3, TINY_MODEL.levels)
