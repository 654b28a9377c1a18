"""Pre-classification stage: target level, Gaussian level weights, fusion, heads."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import DegenerateWeightsError, ParameterError, ShapeError
from .numerics import Tensor

EPS = 1e-6


@dataclass(frozen=True)
class Hyperparams:
    delta: float = 56.0
    sigma: float = math.sqrt(2) / 2
    gamma: float = 0.5
    levels: int = 5

    def validate(self) -> "Hyperparams":
        if not self.delta > 0:
            raise ParameterError(f"delta must be > 0, got {self.delta}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if not self.gamma >= 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if self.levels < 2:
            raise ParameterError(f"need N >= 2 levels, got {self.levels}")
        return self


def _check_extents(w, h):
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if np.any(~(w > 0)) or np.any(~(h > 0)):
        raise ParameterError("ROI width and height must be positive")
    return w, h


def target_level_baseline(w, h, delta: float = 56.0, levels: int = 5):
    """Single 1-based level picked by ROI area (floored, clamped to [1, N])."""
    w, h = _check_extents(w, h)
    i = np.floor(1 + np.log2(np.sqrt(w * h) / delta))
    out = np.clip(i, 1, levels).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def target_level(w, h, delta: float = 56.0, levels: int = 5):
    """Continuous 1-based level, clamped to [1, N]."""
    w, h = _check_extents(w, h)
    out = np.clip(1 + np.log2(np.sqrt(w * h) / delta), 1.0, float(levels))
    return float(out) if out.ndim == 0 else out


def gaussian_weights(i, sigma: float, levels: int) -> np.ndarray:
    """Gaussian pdf evaluated at levels 1..N around (possibly several) centres ``i``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    i = np.asarray(i, dtype=np.float64)
    k = np.arange(1, levels + 1, dtype=np.float64)
    d = k - i[..., None]
    return np.exp(-d * d / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))


def one_hot_levels(level, levels: int) -> np.ndarray:
    """One-hot weights for 1-based integer levels."""
    level = np.asarray(level, dtype=np.int64)
    return np.eye(levels)[level - 1]


def normalize_rows(weights: Tensor) -> Tensor:
    total = nx.sum(weights, axis=-1, keepdims=True)
    return weights / nx.expand(total, weights.shape)


def fuse(features: Sequence, weights, eps: float = EPS, on_degenerate: str = "raise"):
    """Normalised weighted sum of per-level features.

    ``features`` is a list of N tensors, each [C,S,S] (one ROI, ``weights``
    shape [N]) or [R,C,S,S] (``weights`` shape [R,N]). With
    ``on_degenerate="mask"`` rows whose weights sum to at most ``eps`` are
    fused with uniform weights instead of raising, and the function returns
    ``(fused, degenerate_mask)``.
    """
    weights = nx.as_tensor(weights)
    feats = [nx.as_tensor(f) for f in features]
    if len(feats) != weights.shape[-1]:
        raise ShapeError(f"fuse: {len(feats)} levels but {weights.shape[-1]} weights")
    shape = feats[0].shape
    if any(f.shape != shape for f in feats):
        raise ShapeError("fuse: level features differ in shape")
    single = weights.ndim == 1
    if single:
        feats = [nx.reshape(f, (1,) + shape) for f in feats]
        weights = nx.reshape(weights, (1, weights.shape[0]))
    totals = weights.data.sum(axis=-1)
    degenerate = ~(totals > eps)
    if degenerate.any():
        if on_degenerate == "raise":
            raise DegenerateWeightsError(f"fusion weights sum to {totals.min():.3g} <= {eps}")
        fix = np.where(degenerate[:, None], 1.0, 0.0)
        keep = np.where(degenerate[:, None], 0.0, 1.0)
        weights = weights * Tensor(np.broadcast_to(keep, weights.shape).copy()) + Tensor(
            np.broadcast_to(fix, weights.shape).copy()
        )
    norm = normalize_rows(weights)
    stacked = nx.stack(feats, axis=0)  # N,R,C,S,S
    fused = nx.einsum("rn,nrcst->rcst", norm, stacked)
    if single:
        fused = nx.reshape(fused, shape)
    if on_degenerate == "mask":
        return fused, degenerate
    return fused


# ---------------------------------------------------------------- heads
def init_head(rng: np.random.Generator, prefix: str, in_dim: int, hidden: int, num_classes: int,
              regression: bool) -> Dict[str, Tensor]:
    params = {
        f"{prefix}.fc.weight": nx.glorot_uniform(rng, (hidden, in_dim), in_dim, hidden),
        f"{prefix}.fc.bias": Tensor(np.zeros(hidden), requires_grad=True),
        f"{prefix}.cls.weight": nx.glorot_uniform(rng, (num_classes, hidden), hidden, num_classes),
        f"{prefix}.cls.bias": Tensor(np.zeros(num_classes), requires_grad=True),
    }
    if regression:
        params[f"{prefix}.reg.weight"] = nx.glorot_uniform(rng, (4, hidden), hidden, 4)
        params[f"{prefix}.reg.bias"] = Tensor(np.zeros(4), requires_grad=True)
    return params


def head_forward(features, params: Dict[str, Tensor], prefix: str, activation: str = "silu"
                 ) -> Tuple[Tensor, Tensor | None]:
    """Flatten -> affine -> nonlinearity -> class logits (and box deltas if present)."""
    features = nx.as_tensor(features)
    single = features.ndim == 3
    flat = nx.reshape(features, (-1,) if single else (features.shape[0], -1))
    hidden = nx.ACTIVATIONS[activation](nx.affine(flat, params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"]))
    logits = nx.affine(hidden, params[f"{prefix}.cls.weight"], params[f"{prefix}.cls.bias"])
    deltas = None
    if f"{prefix}.reg.weight" in params:
        deltas = nx.affine(hidden, params[f"{prefix}.reg.weight"], params[f"{prefix}.reg.bias"])
    return logits, deltas


def preclass_heads(f_pre, params: Dict[str, Tensor], activation: str = "silu", prefix: str = "pre"):
    logits, deltas = head_forward(f_pre, params, prefix, activation)
    return logits, deltas


def level_weights(rois: np.ndarray, hp: Hyperparams, multi_level: bool) -> np.ndarray:
    """Pre-classification fusion weights [R, N] for (x, y, w, h) ROIs."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if multi_level:
        return gaussian_weights(target_level(rois[:, 2], rois[:, 3], hp.delta, hp.levels), hp.sigma, hp.levels)
    return one_hot_levels(target_level_baseline(rois[:, 2], rois[:, 3], hp.delta, hp.levels), hp.levels)
