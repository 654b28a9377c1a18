"""Feedback refine stage.

Image feedback scores each pyramid level from the whole pyramid; class
feedback turns pre-classification probabilities into a small kernel that is
laid over the levels around each ROI's target level. Their product gives the
refined fusion weights.
"""
from __future__ import annotations

import math
from typing import Dict, List, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ParameterError, ShapeError
from .numerics import Tensor
from .preclass import EPS, fuse, head_forward
from .pyramid import FeaturePyramid

PARAMETERIZATIONS = ("interpolation", "direct", "gaussian")


def kernel_size(levels: int) -> int:
    """Length of the class-feedback kernel, always odd."""
    return 2 * (levels // 2) + 1


def projection_channels(c0: int, levels: int, i: int) -> int:
    if not 1 <= i <= levels:
        raise ConfigurationError(f"level {i} outside 1..{levels}")
    if c0 % 2**levels:
        raise ConfigurationError(f"C0={c0} must be divisible by 2**N={2 ** levels}")
    return c0 // 2 ** (levels + 1 - min(2, i))


# ---------------------------------------------------------------- image feedback
def init_image_feedback(rng: np.random.Generator, c0: int, levels: int) -> Dict[str, Tensor]:
    params = {}
    chans = [projection_channels(c0, levels, k + 1) for k in range(levels)]
    for k, ck in enumerate(chans):
        prev = c0
        # level k (0-based) is 2**(levels-k) times larger than the target grid
        for step in range(levels - k):
            params[f"img.proj.{k}.{step}.weight"] = nx.glorot_uniform(rng, (ck, prev, 3, 3), prev * 9, ck * 9)
            params[f"img.proj.{k}.{step}.bias"] = Tensor(np.zeros(ck), requires_grad=True)
            prev = ck
    total = sum(chans)
    mid = max(c0 // 2, 1)
    params["img.mix.weight"] = nx.glorot_uniform(rng, (mid, total, 3, 3), total * 9, mid * 9)
    params["img.mix.bias"] = Tensor(np.zeros(mid), requires_grad=True)
    params["img.out.weight"] = nx.glorot_uniform(rng, (levels, mid), mid, levels)
    params["img.out.bias"] = Tensor(np.zeros(levels), requires_grad=True)
    return params


def image_feedback(pyramid: FeaturePyramid, params: Dict[str, Tensor], activation: str = "silu") -> Tensor:
    """Non-negative per-level scores, [N] for one image or [B, N] for a batch."""
    act = nx.ACTIVATIONS[activation]
    levels = len(pyramid)
    base = pyramid[0].shape[-2:]
    if min(base) // 2**levels < 1:
        raise ConfigurationError(f"lowest level {base} too small to project to 1/2**{levels} of its size")
    projected = []
    for k, feat in enumerate(pyramid.levels):
        x = feat
        for step in range(levels - k):
            x = act(nx.conv2d(x, params[f"img.proj.{k}.{step}.weight"], params[f"img.proj.{k}.{step}.bias"],
                              stride=2, padding=1))
        projected.append(x)
    shapes = {p.shape[-2:] for p in projected}
    if len(shapes) != 1:
        raise ShapeError(f"projected levels disagree on spatial size: {sorted(shapes)}")
    axis = projected[0].ndim - 3
    x = act(nx.conv2d(nx.concat(projected, axis=axis), params["img.mix.weight"], params["img.mix.bias"], padding=1))
    pooled = nx.mean(x, axis=(-2, -1))
    return nx.softplus(nx.affine(pooled, params["img.out.weight"], params["img.out.bias"]))


# ---------------------------------------------------------------- class feedback
def init_mlp(rng: np.random.Generator, prefix: str, in_dim: int, hidden: int, out_dim: int) -> Dict[str, Tensor]:
    return {
        f"{prefix}.fc1.weight": nx.glorot_uniform(rng, (hidden, in_dim), in_dim, hidden),
        f"{prefix}.fc1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        f"{prefix}.fc2.weight": nx.glorot_uniform(rng, (out_dim, hidden), hidden, out_dim),
        f"{prefix}.fc2.bias": Tensor(np.zeros(out_dim), requires_grad=True),
    }


def _mlp(x, params, prefix, activation):
    h = nx.ACTIVATIONS[activation](nx.affine(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return nx.affine(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def check_probabilities(probs, tol: float = 1e-6) -> None:
    p = nx.as_tensor(probs).data
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ParameterError("class feedback expects softmax probabilities (non-negative, summing to 1)")


def class_feedback(probs, params: Dict[str, Tensor], prefix: str = "cls_fb", activation: str = "silu") -> Tensor:
    """Per-ROI kernel values of length 2*floor(N/2)+1 from pre-classification probabilities."""
    check_probabilities(probs)
    return nx.softplus(_mlp(probs, params, prefix, activation))


def direct_cls_weights(probs, params: Dict[str, Tensor], prefix: str = "cls_fb", activation: str = "silu") -> Tensor:
    """N non-negative level weights straight from the probabilities; blind to ROI area."""
    check_probabilities(probs)
    return nx.softplus(_mlp(probs, params, prefix, activation))


def gaussian_kernel_weights(center, sigma, levels: int) -> Tensor:
    """Differentiable Gaussian pdf at levels 1..N; ``center`` and ``sigma`` are [R] tensors."""
    center, sigma = nx.as_tensor(center), nx.as_tensor(sigma)
    r = center.shape[0]
    k = Tensor(np.broadcast_to(np.arange(1, levels + 1, dtype=np.float64), (r, levels)).copy())
    c = nx.expand(nx.reshape(center, (r, 1)), (r, levels))
    s = nx.expand(nx.reshape(sigma, (r, 1)), (r, levels))
    d = k - c
    z = (d * d) / (s * s)
    return nx.exp(nx.scale(z, -0.5)) / nx.scale(s, math.sqrt(2 * math.pi))


def gaussian_cls_weights(probs, i, params: Dict[str, Tensor], levels: int, prefix: str = "cls_fb",
                         activation: str = "silu") -> Tensor:
    """Gaussian level weights whose centre offset and width come from the probabilities."""
    check_probabilities(probs)
    probs = nx.as_tensor(probs)
    single = probs.ndim == 1
    if single:
        probs = nx.reshape(probs, (1, -1))
    raw = _mlp(probs, params, prefix, activation)
    offset = raw[:, 0]
    # softplus(x + 0.5) starts the width near the sqrt(2)/2 used by the pre stage
    width = nx.softplus(nx.add(raw[:, 1], 0.5))
    i = np.atleast_1d(np.asarray(i, dtype=np.float64))
    center = nx.clip(Tensor(i) + offset, 1.0, float(levels))
    w = gaussian_kernel_weights(center, width, levels)
    return w[0] if single else w


def interpolation_matrix(i, levels: int) -> np.ndarray:
    """Linear map from kernel values [M] to level weights [N], one per ROI: shape [R, N, M].

    Level k inside the window ``|k - i| <= floor(N/2)`` reads the kernel at
    fractional position ``j = k - i + floor(N/2)``; levels outside get zero.
    """
    i = np.atleast_1d(np.asarray(i, dtype=np.float64))
    if np.any(i < 1) or np.any(i > levels):
        raise ParameterError(f"target level outside [1, {levels}]")
    half = levels // 2
    m = kernel_size(levels)
    out = np.zeros((len(i), levels, m))
    for r, ir in enumerate(i):
        for k in range(1, levels + 1):
            if not (ir - half <= k <= ir + half):
                continue
            j = k - ir + half
            lo = int(math.floor(j))
            frac = j - lo
            if lo >= m - 1:
                out[r, k - 1, m - 1] = 1.0
                continue
            out[r, k - 1, lo] += 1.0 - frac
            out[r, k - 1, lo + 1] += frac
    return out


def interpolate_cls_weights(phi_cls, i, levels: int) -> Tensor:
    """Piecewise-linear reading of the class-feedback kernel centred at level ``i``."""
    phi = nx.as_tensor(phi_cls)
    single = phi.ndim == 1
    if single:
        phi = nx.reshape(phi, (1, -1))
    if phi.shape[1] != kernel_size(levels):
        raise ShapeError(f"class feedback has {phi.shape[1]} values, expected {kernel_size(levels)}")
    a = interpolation_matrix(i, levels)
    if a.shape[0] != phi.shape[0]:
        raise ShapeError(f"{a.shape[0]} target levels for {phi.shape[0]} ROIs")
    w = nx.einsum("rnm,rm->rn", Tensor(a), phi)
    return nx.reshape(w, (levels,)) if single else w


def combine_weights(phi_img, w_cls) -> Tensor:
    phi_img, w_cls = nx.as_tensor(phi_img), nx.as_tensor(w_cls)
    if phi_img.shape[-1] != w_cls.shape[-1]:
        raise ShapeError(f"image feedback has {phi_img.shape[-1]} levels, class weights {w_cls.shape[-1]}")
    if phi_img.shape != w_cls.shape:
        phi_img = nx.expand(phi_img, w_cls.shape)
    return phi_img * w_cls


def refine(level_features: Sequence, w_fb, params: Dict[str, Tensor], prefix: str = "refine.0",
           activation: str = "silu", eps: float = EPS, on_degenerate: str = "raise"):
    """Fuse level features with the feedback weights and classify the result.

    Returns ``(f_refine, logits)``; with ``on_degenerate="mask"`` a third
    element flags ROIs whose weights collapsed.
    """
    out = fuse(level_features, w_fb, eps=eps, on_degenerate=on_degenerate)
    f_refine, mask = out if on_degenerate == "mask" else (out, None)
    logits, _ = head_forward(f_refine, params, prefix, activation)
    if on_degenerate == "mask":
        return f_refine, logits, mask
    return f_refine, logits
