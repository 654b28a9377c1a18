"""Joint training, evaluation and checkpointing."""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, NumericFailure, PersistedStateError
from .evaluation import Detections, EvalReport, evaluate_detections
from .model import (FlexModel, ModelConfig, config_digest, decode_boxes, encode_boxes, jitter_boxes,
                    model_config_from_dict)
from .numerics import Tensor
from .numerics.serialize import read_tensor, write_tensor
from .synthgen import Scene

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "loss_total", "loss_reg", "loss_cls_pre", "loss_cls_refine", "mAP", "AP50", "AP75",
                  "fallbacks")
CHECKPOINT_MAGIC = b"FLXC"


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 12
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Optional[tuple] = None
    seed: int = 0
    jitter: float = 0.2
    proposals_per_object: int = 2
    grad_clip: Optional[float] = 10.0
    eval_seed: int = 1234

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        return self

    @property
    def schedule(self) -> tuple:
        if self.milestones is not None:
            return tuple(self.milestones)
        return (round(self.epochs * 2 / 3), round(self.epochs * 11 / 12))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones) if self.milestones is not None else None
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @classmethod
    def from_dict(cls, document: dict) -> "TrainConfig":
        document = dict(document)
        known = {f.name for f in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        model = document.pop("model", {})
        if isinstance(model, dict):
            model = model_config_from_dict(model)
        if document.get("milestones") is not None:
            document["milestones"] = tuple(document["milestones"])
        return cls(model=model, **document)


# ---------------------------------------------------------------- loss
@dataclass
class LossParts:
    total: Tensor
    reg: float
    cls_pre: float
    cls_refine: float


def total_loss(pre_logits, refine_logits, bbox_deltas, labels, reg_targets, gamma: float) -> LossParts:
    """Box regression + gamma * pre-classification CE + refined CE, averaged over ROIs.

    ``refine_logits`` is a list with one entry per refinement layer; each
    layer contributes its own cross-entropy. Without refinement layers the
    pre-classification CE carries weight 1 (the plain two-stage loss).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if isinstance(refine_logits, Tensor):
        refine_logits = [refine_logits]
    if len(labels) == 0:
        zero = Tensor(np.asarray(0.0))
        return LossParts(zero, 0.0, 0.0, 0.0)
    reg = nx.smooth_l1(bbox_deltas, Tensor(np.asarray(reg_targets, dtype=np.float64)), beta=1.0)
    cls_pre = nx.softmax_cross_entropy(pre_logits, labels)
    total = reg + cls_pre * (gamma if refine_logits else 1.0)
    cls_ref = 0.0
    for logits in refine_logits:
        ce = nx.softmax_cross_entropy(logits, labels)
        total = total + ce
        cls_ref += ce.item()
    return LossParts(total, reg.item(), cls_pre.item(), cls_ref)


# ---------------------------------------------------------------- optimizer
class SGD:
    """Momentum SGD with L2 weight decay and milestone decay; touches only ``names``."""

    def __init__(self, params: Dict[str, Tensor], names: Sequence[str], lr: float, momentum: float,
                 weight_decay: float, grad_clip: Optional[float] = None):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> float:
        grads = {}
        for n in self.names:
            p = self.params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads[n] = g
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        factor = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            factor = self.grad_clip / norm
        for n in self.names:
            p = self.params[n]
            g = grads[n] * factor + self.weight_decay * p.data
            v = self.velocity[n]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
        return norm


# ---------------------------------------------------------------- batching
def _scene_rois(scene: Scene, rng: Optional[np.random.Generator], jitter: float, copies: int):
    boxes, labels = scene.boxes, scene.labels
    if len(boxes) == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros((0, 4))
    h, w = scene.image.shape[-2:]
    boxes = np.repeat(boxes, copies, axis=0)
    labels = np.repeat(labels, copies)
    proposals = jitter_boxes(rng, boxes, w, h, jitter) if rng is not None else boxes.copy()
    return proposals, labels, boxes


def make_batch(scenes: Sequence[Scene], rng: Optional[np.random.Generator], jitter: float, copies: int):
    images = np.stack([s.image for s in scenes])
    props, labels, gts, bidx = [], [], [], []
    for b, s in enumerate(scenes):
        p, l, g = _scene_rois(s, rng, jitter, copies)
        props.append(p)
        labels.append(l)
        gts.append(g)
        bidx.append(np.full(len(p), b, dtype=np.int64))
    return images, np.concatenate(props), np.concatenate(labels), np.concatenate(gts), np.concatenate(bidx)


# ---------------------------------------------------------------- training
@dataclass
class TrainResult:
    model: FlexModel
    rows: List[dict]
    config: TrainConfig

    @property
    def last(self) -> dict:
        return self.rows[-1] if self.rows else {}


def train(config: TrainConfig, scenes: Sequence[Scene], eval_scenes: Optional[Sequence[Scene]] = None,
          log_path=None, checkpoint_path=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a model from scratch; deterministic for a fixed ``config.seed``."""
    config.validate()
    scenes = list(scenes)
    if not scenes:
        raise ConfigurationError("training needs a non-empty dataset")
    mc = config.model
    for s in scenes:
        if len(s.labels) and s.labels.max() >= mc.num_classes:
            raise ConfigurationError(f"dataset label {s.labels.max()} outside {mc.num_classes} classes")
    model = FlexModel.initialize(mc, config.seed)
    names = model.active_parameter_names()
    opt = SGD(model.params, names, config.lr, config.momentum, config.weight_decay, config.grad_clip)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 9001]))
    milestones = config.schedule
    rows = []
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        opt.lr = config.lr * 0.1 ** sum(epoch > m for m in milestones)
        order = rng.permutation(len(scenes))
        sums = np.zeros(4)
        count = 0
        fallbacks = 0
        for start in range(0, len(order), config.batch_size):
            batch = [scenes[j] for j in order[start:start + config.batch_size]]
            images, props, labels, gts, bidx = make_batch(batch, rng, config.jitter, config.proposals_per_object)
            iteration += 1
            if len(labels) == 0:
                continue
            model.zero_grad()
            out = model.forward(images, props, bidx)
            parts = total_loss(out.pre_logits, out.refine_logits, out.deltas, labels,
                               encode_boxes(props, gts), mc.gamma)
            value = parts.total.item()
            if not np.isfinite(value):
                logits = out.final_logits.data
                bad = np.flatnonzero(~np.all(np.isfinite(logits), axis=1))
                roi = int(bad[0]) if len(bad) else None
                raise NumericFailure(f"non-finite loss at iteration {iteration} (epoch {epoch}, roi {roi})",
                                     iteration=iteration, roi_id=roi)
            parts.total.backward()
            opt.step()
            n = len(labels)
            sums += n * np.array([value, parts.reg, parts.cls_pre, parts.cls_refine])
            count += n
            fallbacks += out.fallbacks
        means = sums / max(count, 1)
        row = {"epoch": epoch, "loss_total": means[0], "loss_reg": means[1], "loss_cls_pre": means[2],
               "loss_cls_refine": means[3]}
        if eval_scenes is not None:
            report = evaluate(model, eval_scenes, seed=config.eval_seed)
            row.update(mAP=report.map, AP50=report.ap50, AP75=report.ap75)
        else:
            row.update(mAP=float("nan"), AP50=float("nan"), AP75=float("nan"))
        row["fallbacks"] = fallbacks
        rows.append(row)
        logger.info("epoch %d loss %.4f mAP %.4f", epoch, row["loss_total"], row["mAP"])
        if on_epoch is not None:
            on_epoch(row)
    result = TrainResult(model, rows, config)
    if log_path is not None:
        write_metrics(log_path, rows)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, config)
    return result


def format_metrics(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([row["epoch"]] + [f"{float(row[c]):.10g}" for c in METRIC_COLUMNS[1:-1]]
                        + [int(row["fallbacks"])])
    return buf.getvalue()


def write_metrics(path, rows: Sequence[dict]) -> None:
    Path(path).write_text(format_metrics(rows))


# ---------------------------------------------------------------- inference
@dataclass
class Predictions:
    detections: List[Detections]
    pre_probs: np.ndarray
    final_probs: np.ndarray
    labels: np.ndarray
    image_index: np.ndarray
    phi_img: Optional[np.ndarray]
    fallbacks: int


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model: FlexModel, scenes: Sequence[Scene], seed: int = 1234, jitter: float = 0.2,
            batch_size: int = 8, depth: Optional[int] = None) -> Predictions:
    """Classify jittered ground-truth proposals and emit one detection per (proposal, class)."""
    k = model.config.num_classes
    dets, pre, fin, labs, imgs, phis = [], [], [], [], [], []
    fallbacks = 0
    with nx.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            props, labels = [], []
            for j, s in enumerate(chunk):
                rng = np.random.default_rng(np.random.SeedSequence([seed, start + j]))
                p, l, _ = _scene_rois(s, rng, jitter, 1)
                props.append(p)
                labels.append(l)
            images = np.stack([s.image for s in chunk])
            bidx = np.concatenate([np.full(len(p), j) for j, p in enumerate(props)]).astype(np.int64)
            allp = np.concatenate(props)
            out = model.forward(images, allp, bidx, depth=depth)
            fallbacks += out.fallbacks
            if out.phi_img is not None:
                phis.append(out.phi_img.data)
            if len(allp) == 0:
                dets.extend(Detections.empty() for _ in chunk)
                continue
            pp = _softmax(out.pre_logits.data)
            fp = _softmax(out.final_logits.data)
            boxes = decode_boxes(allp, out.deltas.data)
            pre.append(pp)
            fin.append(fp)
            labs.append(np.concatenate(labels))
            imgs.append(bidx + start)
            for j in range(len(chunk)):
                sel = bidx == j
                nb = int(sel.sum())
                dets.append(Detections(np.repeat(boxes[sel], k, axis=0), fp[sel].reshape(-1),
                                       np.tile(np.arange(k), nb)))
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return Predictions(dets, cat(pre, (0, k)), cat(fin, (0, k)), cat(labs, (0,)).astype(np.int64),
                       cat(imgs, (0,)).astype(np.int64), np.concatenate(phis) if phis else None, fallbacks)


def evaluate(model: FlexModel, scenes: Sequence[Scene], seed: int = 1234, depth: Optional[int] = None,
             num_classes: Optional[int] = None) -> EvalReport:
    if num_classes is not None and num_classes != model.config.num_classes:
        raise ConfigurationError(f"dataset has {num_classes} classes, model {model.config.num_classes}")
    for s in scenes:
        if len(s.labels) and s.labels.max() >= model.config.num_classes:
            raise ConfigurationError("dataset labels exceed the model's class count")
    preds = predict(model, list(scenes), seed=seed, depth=depth)
    return evaluate_detections(preds.detections, [s.boxes for s in scenes], [s.labels for s in scenes],
                               model.config.num_classes, preds.fallbacks)


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(path, model: FlexModel, config: Optional[TrainConfig] = None) -> str:
    """Write header (config, digest, parameter manifest) then tensor payloads; returns the digest."""
    document = config.to_dict() if config is not None else {"model": asdict(model.config)}
    digest = config_digest(document)
    header = {
        "config": document,
        "config_digest": digest,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob)
            for p in model.params.values():
                write_tensor(fh, p.data)
    except OSError as exc:
        raise PersistedStateError(f"cannot write checkpoint {path}: {exc}") from exc
    return digest


def load_checkpoint(path):
    """Returns ``(model, train_config, digest)``."""
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise PersistedStateError(f"{path} is not a checkpoint")
            (length,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(length))
            params = {}
            for entry in header["params"]:
                arr = read_tensor(fh)
                if list(arr.shape) != entry["shape"]:
                    raise PersistedStateError(f"shape mismatch for {entry['name']}")
                params[entry["name"]] = Tensor(arr, requires_grad=True)
    except OSError as exc:
        raise PersistedStateError(f"cannot read checkpoint {path}: {exc}") from exc
    config = TrainConfig.from_dict(header["config"])
    return FlexModel(config.model, params), config, header["config_digest"]


def file_digest(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
