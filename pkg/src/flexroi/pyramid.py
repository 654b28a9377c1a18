"""Strided convolutional backbone producing an N-level feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ParameterError
from .numerics import Tensor


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 5
    channels: int = 64
    stem_stride: int = 2
    activation: str = "silu"

    def validate(self) -> "PyramidConfig":
        if self.levels < 2:
            raise ConfigurationError(f"need at least 2 pyramid levels, got {self.levels}")
        if self.channels < 1 or self.stem_stride < 1:
            raise ConfigurationError("channels and stem_stride must be positive")
        if self.activation not in nx.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        return self


@dataclass(frozen=True)
class RoI:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ParameterError(f"RoI extents must be positive, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def clamped(self, width: float, height: float) -> "RoI":
        x0, y0 = min(max(self.x, 0.0), width), min(max(self.y, 0.0), height)
        x1, y1 = min(max(self.x + self.w, 0.0), width), min(max(self.y + self.h, 0.0), height)
        return RoI(x0, y0, max(x1 - x0, 1e-6), max(y1 - y0, 1e-6))


class FeaturePyramid:
    """Levels ``1..N`` (stored 0-based); level k has stride ``stem_stride * 2**(k-1)``."""

    def __init__(self, levels: List[Tensor], stem_stride: int):
        self.levels = levels
        self.stem_stride = stem_stride

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> Tensor:
        return self.levels[k]

    def scale(self, k: int) -> float:
        """Image-pixel to feature-cell factor for 0-based level ``k``."""
        return 1.0 / (self.stem_stride * 2**k)

    @property
    def shapes(self):
        return [lvl.shape for lvl in self.levels]


def level_extents(height: int, width: int, config: PyramidConfig) -> List[tuple]:
    """Spatial extents of each level for a given image size."""
    h = nx.conv_output_size(height, 3, config.stem_stride, 1)
    w = nx.conv_output_size(width, 3, config.stem_stride, 1)
    out = [(h, w)]
    for _ in range(config.levels - 1):
        h, w = nx.conv_output_size(h, 3, 2, 1), nx.conv_output_size(w, 3, 2, 1)
        out.append((h, w))
    return out


def check_image_size(height: int, width: int, config: PyramidConfig) -> None:
    need = config.stem_stride * 2 ** (config.levels - 1)
    if height < need or width < need:
        raise ConfigurationError(
            f"image {height}x{width} too small for {config.levels} levels (needs >= {need} pixels)"
        )


def init_pyramid(rng: np.random.Generator, config: PyramidConfig, in_channels: int = 3) -> Dict[str, Tensor]:
    config.validate()
    c = config.channels
    params = {}
    prev = in_channels
    for k in range(config.levels):
        params[f"backbone.{k}.weight"] = nx.glorot_uniform(rng, (c, prev, 3, 3), prev * 9, c * 9)
        params[f"backbone.{k}.bias"] = Tensor(np.zeros(c), requires_grad=True)
        prev = c
    return params


def build_pyramid(image, params: Dict[str, Tensor], config: PyramidConfig) -> FeaturePyramid:
    """Run the backbone on a [3,H,W] image or a [B,3,H,W] batch."""
    image = nx.as_tensor(image)
    check_image_size(image.shape[-2], image.shape[-1], config)
    act = nx.ACTIVATIONS[config.activation]
    x = image
    levels = []
    for k in range(config.levels):
        stride = config.stem_stride if k == 0 else 2
        x = act(nx.conv2d(x, params[f"backbone.{k}.weight"], params[f"backbone.{k}.bias"], stride=stride, padding=1))
        levels.append(x)
    return FeaturePyramid(levels, config.stem_stride)


def roi_pool(level, roi, k: int, size: int = 7, stem_stride: int = 2, batch_index=None) -> Tensor:
    """Pool ROI(s) from 0-based level ``k`` into ``[R, C, size, size]``.

    ``roi`` is a :class:`RoI`, an (x, y, w, h) row, or an [R, 4] array.
    A ROI falling completely outside the map pools to zeros.
    """
    if isinstance(roi, RoI):
        roi = roi.as_array()
    rois = np.asarray(roi, dtype=np.float64).reshape(-1, 4)
    return nx.roi_align(level, rois, 1.0 / (stem_stride * 2**k), size, batch_index)


def pool_all_levels(pyramid: FeaturePyramid, rois: np.ndarray, size: int, batch_index=None) -> List[Tensor]:
    return [
        nx.roi_align(level, rois, pyramid.scale(k), size, batch_index)
        for k, level in enumerate(pyramid.levels)
    ]
