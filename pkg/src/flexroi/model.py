"""Two-stage ROI classifier with feedback refinement.

``FlexModel`` owns the parameters of every stage and runs the forward pass
for a batch of images and their proposals. The ablation mode selects which
parts of the refine stage are active:

* ``baseline``     single level per ROI picked by area, no refine stage
* ``multi-level``  Gaussian fusion in both stages, fixed weights
* ``+cls``         refine weights from class feedback
* ``+cls+img``     class feedback scaled by image feedback
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional

import numpy as np

from . import feedback as fb
from . import numerics as nx
from .errors import ConfigurationError, UsageError
from .numerics import Tensor
from .preclass import Hyperparams, fuse, gaussian_weights, head_forward, init_head, level_weights, target_level
from .pyramid import PyramidConfig, build_pyramid, init_pyramid, pool_all_levels

ABLATIONS = ("baseline", "multi-level", "+cls", "+cls+img")
_COMPONENTS = {
    frozenset(): "baseline",
    frozenset({"multi-level"}): "multi-level",
    frozenset({"multi-level", "cls"}): "+cls",
    frozenset({"multi-level", "cls", "img"}): "+cls+img",
}
BOX_STDS = np.array([0.1, 0.1, 0.2, 0.2])


def parse_ablation(text: str) -> str:
    """Canonical ablation name from a name or a ``+``/``,`` separated component list.

    Components must nest: class feedback needs multi-level fusion, image
    feedback needs class feedback.
    """
    text = text.strip()
    if text in ABLATIONS:
        return text
    parts = {p.strip().lower() for p in text.replace(",", "+").split("+") if p.strip()}
    aliases = {"ml": "multi-level", "multilevel": "multi-level", "multi-level": "multi-level",
               "cls": "cls", "class": "cls", "img": "img", "image": "img", "none": None}
    unknown = parts - set(aliases)
    if unknown:
        raise UsageError(f"unknown ablation component(s): {sorted(unknown)}")
    comps = frozenset(aliases[p] for p in parts if aliases[p])
    if comps not in _COMPONENTS:
        raise UsageError(
            f"invalid ablation {text!r}: components must nest as multi-level < +cls < +cls+img"
        )
    return _COMPONENTS[comps]


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    levels: int = 5
    channels: int = 64
    stem_stride: int = 2
    pool_size: int = 7
    hidden: int = 256
    feedback_hidden: int = 64
    activation: str = "silu"
    delta: float = 56.0
    sigma: float = math.sqrt(2) / 2
    gamma: float = 0.5
    ablation: str = "+cls+img"
    parameterization: str = "interpolation"
    cascade_depth: int = 1

    def validate(self) -> "ModelConfig":
        if self.ablation not in ABLATIONS:
            raise UsageError(f"unknown ablation {self.ablation!r}")
        if self.parameterization not in fb.PARAMETERIZATIONS:
            raise UsageError(f"unknown parameterization {self.parameterization!r}")
        if self.parameterization != "interpolation" and self.ablation in ("baseline", "multi-level"):
            raise UsageError(f"parameterization {self.parameterization!r} needs class feedback")
        if self.cascade_depth < 0:
            raise UsageError("cascade depth must be >= 0")
        if self.pool_size < 1 or self.hidden < 1 or self.num_classes < 2:
            raise ConfigurationError("pool_size, hidden must be >= 1 and num_classes >= 2")
        self.hyperparams.validate()
        self.pyramid.validate()
        fb.projection_channels(self.channels, self.levels, 1)
        return self

    @property
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.delta, self.sigma, self.gamma, self.levels)

    @property
    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(self.levels, self.channels, self.stem_stride, self.activation)

    @property
    def refine_layers(self) -> int:
        return 0 if self.ablation == "baseline" else self.cascade_depth

    @property
    def uses_class_feedback(self) -> bool:
        return self.ablation in ("+cls", "+cls+img")

    @property
    def uses_image_feedback(self) -> bool:
        return self.ablation == "+cls+img"

    def digest(self) -> str:
        return config_digest(asdict(self))


def config_digest(document: dict) -> str:
    payload = json.dumps(document, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# ---------------------------------------------------------------- boxes
def encode_boxes(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) deltas from (x, y, w, h) proposals to targets, divided by BOX_STDS."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    pcx, pcy = p[:, 0] + p[:, 2] / 2, p[:, 1] + p[:, 3] / 2
    gcx, gcy = g[:, 0] + g[:, 2] / 2, g[:, 1] + g[:, 3] / 2
    d = np.stack([(gcx - pcx) / p[:, 2], (gcy - pcy) / p[:, 3],
                  np.log(g[:, 2] / p[:, 2]), np.log(g[:, 3] / p[:, 3])], axis=1)
    return d / BOX_STDS


def decode_boxes(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4) * BOX_STDS
    clamp = math.log(1000.0 / 16)
    pcx, pcy = p[:, 0] + p[:, 2] / 2, p[:, 1] + p[:, 3] / 2
    cx, cy = pcx + d[:, 0] * p[:, 2], pcy + d[:, 1] * p[:, 3]
    w = p[:, 2] * np.exp(np.minimum(d[:, 2], clamp))
    h = p[:, 3] * np.exp(np.minimum(d[:, 3], clamp))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def jitter_boxes(rng: np.random.Generator, boxes: np.ndarray, width: float, height: float,
                 amount: float = 0.2) -> np.ndarray:
    """Shift centres by up to ``amount`` of the extent and rescale by up to exp(+-amount)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(b)
    shift = rng.uniform(-amount, amount, size=(n, 2))
    logscale = rng.uniform(-amount, amount, size=(n, 2))
    cx = b[:, 0] + b[:, 2] * (0.5 + shift[:, 0])
    cy = b[:, 1] + b[:, 3] * (0.5 + shift[:, 1])
    w = b[:, 2] * np.exp(logscale[:, 0])
    h = b[:, 3] * np.exp(logscale[:, 1])
    x0, y0 = np.clip(cx - w / 2, 0, width), np.clip(cy - h / 2, 0, height)
    x1, y1 = np.clip(cx + w / 2, 0, width), np.clip(cy + h / 2, 0, height)
    return np.stack([x0, y0, np.maximum(x1 - x0, 1.0), np.maximum(y1 - y0, 1.0)], axis=1)


# ---------------------------------------------------------------- model
@dataclass
class ForwardOutput:
    pre_logits: Tensor
    deltas: Tensor
    refine_logits: List[Tensor]
    phi_img: Optional[Tensor]
    target_levels: np.ndarray
    fallbacks: int = 0
    level_weights: List[Tensor] = field(default_factory=list)

    @property
    def final_logits(self) -> Tensor:
        return self.refine_logits[-1] if self.refine_logits else self.pre_logits


_GROUPS = ("backbone", "pre", "img", "cls_fb", "refine")


class FlexModel:
    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "FlexModel":
        """Every parameter group draws from its own seeded stream, so shared
        groups start identical across ablation modes for the same seed."""
        config.validate()
        c = config
        streams = {g: np.random.default_rng(np.random.SeedSequence([seed, n])) for n, g in enumerate(_GROUPS)}
        params: Dict[str, Tensor] = {}
        params.update(init_pyramid(streams["backbone"], c.pyramid))
        in_dim = c.channels * c.pool_size * c.pool_size
        params.update(init_head(streams["pre"], "pre", in_dim, c.hidden, c.num_classes, regression=True))
        params.update(fb.init_image_feedback(streams["img"], c.channels, c.levels))
        params["img.out.bias"].data[...] = _softplus_inverse(1.0)
        out_dim = {"interpolation": fb.kernel_size(c.levels), "direct": c.levels, "gaussian": 2}[c.parameterization]
        for t in range(max(c.cascade_depth, 1)):
            params.update(fb.init_mlp(streams["cls_fb"], f"cls_fb.{t}", c.num_classes, c.feedback_hidden, out_dim))
            # start from the prior: the last feedback layer ignores its input until trained
            params[f"cls_fb.{t}.fc2.weight"].data[...] = 0.0
            params[f"cls_fb.{t}.fc2.bias"].data[...] = _feedback_bias(c)
            params.update(init_head(streams["refine"], f"refine.{t}", in_dim, c.hidden, c.num_classes, regression=False))
        return cls(config, params)

    # -- parameter bookkeeping --------------------------------------------
    def active_parameter_names(self) -> List[str]:
        c = self.config
        groups = {"backbone", "pre"}
        layers = c.refine_layers
        if layers:
            groups.add("refine")
        if c.uses_class_feedback and layers:
            groups.add("cls_fb")
        if c.uses_image_feedback and layers:
            groups.add("img")
        names = []
        for name in self.params:
            group = name.split(".")[0]
            if group not in groups:
                continue
            if group in ("refine", "cls_fb") and int(name.split(".")[1]) >= layers:
                continue
            names.append(name)
        return names

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "FlexModel":
        return FlexModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    # -- forward ----------------------------------------------------------
    def image_feedback(self, images) -> Tensor:
        images = _as_batch(images)
        pyramid = build_pyramid(images, self.params, self.config.pyramid)
        return fb.image_feedback(pyramid, self.params, self.config.activation)

    def forward(self, images, rois: np.ndarray, batch_index=None, depth: Optional[int] = None) -> ForwardOutput:
        """Run both stages on [B,3,H,W] images and (x, y, w, h) proposals.

        ``depth`` overrides the number of refinement layers (at most the
        configured cascade depth).
        """
        c = self.config
        images = _as_batch(images)
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        if batch_index is None:
            batch_index = np.zeros(len(rois), dtype=np.int64)
        batch_index = np.asarray(batch_index, dtype=np.int64)
        layers = c.refine_layers if depth is None else min(depth, c.refine_layers)
        hp = c.hyperparams

        pyramid = build_pyramid(images, self.params, c.pyramid)
        feats = pool_all_levels(pyramid, rois, c.pool_size, batch_index)
        multi = c.ablation != "baseline"
        pre_w = level_weights(rois, hp, multi_level=multi)
        f_pre = fuse(feats, Tensor(pre_w))
        pre_logits, deltas = head_forward(f_pre, self.params, "pre", c.activation)
        levels_i = target_level(rois[:, 2], rois[:, 3], hp.delta, hp.levels) if len(rois) else np.zeros(0)
        levels_i = np.atleast_1d(levels_i)

        phi_img = None
        if c.uses_image_feedback and layers:
            phi_img = fb.image_feedback(pyramid, self.params, c.activation)

        out = ForwardOutput(pre_logits, deltas, [], phi_img, levels_i)
        prev = pre_logits
        for t in range(layers):
            w_cls = self._class_weights(t, prev, levels_i, pre_w)
            w_fb = fb.combine_weights(nx.index(phi_img, batch_index), w_cls) if phi_img is not None else w_cls
            _, logits, mask = fb.refine(feats, w_fb, self.params, f"refine.{t}", c.activation, on_degenerate="mask")
            if mask.any():
                out.fallbacks += int(mask.sum())
                keep = Tensor(np.repeat(~mask[:, None], c.num_classes, axis=1).astype(np.float64))
                swap = Tensor(np.repeat(mask[:, None], c.num_classes, axis=1).astype(np.float64))
                logits = logits * keep + prev * swap
            out.refine_logits.append(logits)
            out.level_weights.append(w_fb)
            prev = logits
        return out

    def _class_weights(self, t: int, prev_logits: Tensor, levels_i: np.ndarray, pre_w: np.ndarray) -> Tensor:
        c = self.config
        if not c.uses_class_feedback:
            return Tensor(pre_w)
        probs = nx.softmax(prev_logits)
        prefix = f"cls_fb.{t}"
        if c.parameterization == "interpolation":
            phi = fb.class_feedback(probs, self.params, prefix, c.activation)
            return fb.interpolate_cls_weights(phi, levels_i, c.levels)
        if c.parameterization == "direct":
            return fb.direct_cls_weights(probs, self.params, prefix, c.activation)
        return fb.gaussian_cls_weights(probs, levels_i, self.params, c.levels, prefix, c.activation)


def _softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _feedback_bias(c: ModelConfig) -> np.ndarray:
    """Output bias that makes untrained class feedback reproduce the pre-stage Gaussian."""
    if c.parameterization == "interpolation":
        m = fb.kernel_size(c.levels)
        return _softplus_inverse(gaussian_weights(m // 2 + 1, c.sigma, m))
    if c.parameterization == "gaussian":
        return np.array([0.0, float(_softplus_inverse(c.sigma)) - 0.5])
    return np.zeros(c.levels)


def _as_batch(images) -> Tensor:
    images = nx.as_tensor(images)
    if images.ndim == 3:
        images = nx.reshape(images, (1,) + images.shape)
    return images


def model_config_from_dict(document: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(document) - known
    if unknown:
        raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**document)


def with_overrides(config: ModelConfig, **overrides) -> ModelConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
