"""Central finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from ..errors import NumericInputError
from .tensor import Tensor


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def _evaluate(fn) -> float:
    value = fn()
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise NumericInputError("finite_diff_check: function returned a non-finite value")
    return value


def numeric_gradient(fn: Callable[[], object], param: Tensor, step: float = 1e-5,
                     coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. ``param`` at the given flat coordinates."""
    flat = param.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    for n, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + step
        up = _evaluate(fn)
        flat[c] = orig - step
        down = _evaluate(fn)
        flat[c] = orig
        out[n] = (up - down) / (2.0 * step)
    return out


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list:
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = fn()
    if not np.isfinite(loss.item()):
        raise NumericInputError("finite_diff_check: function returned a non-finite value")
    loss.backward()
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def finite_diff_check(fn: Callable[[], Tensor], params: Dict[str, Tensor] | Sequence[Tensor],
                      step: float = 1e-5, tolerance: float = 1e-4,
                      max_coords: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """Max relative error per parameter between backprop and central differences.

    ``fn`` rebuilds the scalar output from the current parameter values on
    every call. With ``max_coords`` only a seeded random subset of each
    parameter's coordinates is probed. ``tolerance`` is not enforced here; it
    is returned under the key ``"__tolerance__"`` so callers can assert on it.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    names = list(params)
    tensors = [params[n] for n in names]
    grads = analytic_gradients(fn, tensors)
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, p, g in zip(names, tensors, grads):
        size = p.data.size
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, max_coords, replace=False))
        else:
            coords = np.arange(size)
        num = numeric_gradient(fn, p, step, coords)
        errors[name] = float(relative_error(g.reshape(-1)[coords], num).max()) if len(coords) else 0.0
    errors["__tolerance__"] = tolerance
    return errors


def directional_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                      seed: int = 0) -> float:
    """Relative error of the gradient projected on one random direction over all coordinates."""
    grads = analytic_gradients(fn, params)
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
    origs = [p.data.copy() for p in params]

    def shifted(eps):
        for p, o, d in zip(params, origs, dirs):
            p.data[...] = o + eps * d
        return _evaluate(fn)

    numeric = (shifted(step) - shifted(-step)) / (2 * step)
    for p, o in zip(params, origs):
        p.data[...] = o
    return float(relative_error(analytic, numeric))
