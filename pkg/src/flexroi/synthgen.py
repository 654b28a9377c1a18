"""Synthetic labelled scenes and mean-kernel blurring.

Classes are laid out as ``shape x texture``: class ``c`` draws shape
``c // 3`` and texture ``c % 3``. The three textures (plain, stripes,
checker) share the same mean intensity, so once a mean kernel wipes out the
two-pixel pattern, classes that share a shape become hard to tell apart.

Each object also sits in a faint surrounding ring whose brightness encodes
the texture, correctly with probability ``context_prob``. The ring lies
outside the box and is low-frequency, so it survives blurring but is only
visible to features with a large receptive field.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ParameterError, PersistedStateError
from .numerics.serialize import load_tensor, save_tensor

INDEX_VERSION = 1
INDEX_NAME = "index.json"
DEFAULT_BLUR_SIZES = (1, 5, 9, 15, 21)
SHAPES = ("square", "disc", "diamond", "cross")
TEXTURES = ("plain", "stripes", "checker")


@dataclass(frozen=True)
class Annotation:
    box: Tuple[float, float, float, float]  # x, y, w, h
    label: int


@dataclass
class Scene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    annotations: List[Annotation]
    blur: int = 1

    @property
    def boxes(self) -> np.ndarray:
        return np.array([a.box for a in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([a.label for a in self.annotations], dtype=np.int64)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 256
    min_objects: int = 1
    max_objects: int = 8
    min_scale: float = 16.0
    max_scale: float = 96.0
    num_classes: int = 6
    noise: float = 0.02
    texture_contrast: float = 0.25
    context_prob: float = 0.75
    context_contrast: float = 0.12
    context_margin: float = 0.3
    max_retries: int = 200

    def validate(self) -> "SynthConfig":
        if self.image_size < 64:
            raise ParameterError(f"image_size must be >= 64, got {self.image_size}")
        if self.num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > len(SHAPES) * len(TEXTURES):
            raise ParameterError(f"at most {len(SHAPES) * len(TEXTURES)} classes supported")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ParameterError("object count range must satisfy 0 <= min <= max")
        if not 2 <= self.min_scale <= self.max_scale <= self.image_size:
            raise ParameterError("scale range must satisfy 2 <= min <= max <= image_size")
        if not 0 <= self.context_prob <= 1 or self.context_margin < 0:
            raise ParameterError("context_prob must lie in [0, 1] and context_margin be >= 0")
        return self


def _texture(kind: str, h: int, w: int, contrast: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "plain":
        return np.zeros((h, w))
    if kind == "stripes":
        return np.where(xx % 2 == 0, contrast, -contrast)
    return np.where((xx + yy) % 2 == 0, contrast, -contrast)


def _mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "disc":
        return u * u + v * v <= 1.0
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    return (np.abs(u) <= 0.35) | (np.abs(v) <= 0.35)


def _intersects(a, b) -> bool:
    return a[0] < b[0] + b[2] and b[0] < a[0] + a[2] and a[1] < b[1] + b[3] and b[1] < a[1] + a[3]


def _expand(box, margin: float, size: int):
    x, y, w, h = box
    mx, my = int(round(margin * w)), int(round(margin * h))
    x0, y0 = max(x - mx, 0), max(y - my, 0)
    x1, y1 = min(x + w + mx, size), min(y + h + my, size)
    return (x0, y0, x1 - x0, y1 - y0)


def _overlaps(box, placed, margin: float, size: int) -> bool:
    """True if ``box`` or its context ring touches an earlier object (rings may overlap rings)."""
    ring = _expand(box, margin, size)
    for other in placed:
        if _intersects(box, other) or _intersects(ring, other) or _intersects(box, _expand(other, margin, size)):
            return True
    return False


def synth_scene(seed, config: SynthConfig = SynthConfig(), n_objects: Optional[int] = None) -> Scene:
    """Draw one clean scene. ``seed`` may be an int or a sequence of ints."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    size = config.image_size
    if n_objects is None:
        n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))

    # smooth clutter background
    coarse = rng.uniform(0.15, 0.45, size=(3, 8, 8))
    image = ndimage.zoom(coarse, (1, size / 8, size / 8), order=1, mode="nearest")[:, :size, :size]

    placed: List[Tuple[int, int, int, int]] = []
    annotations: List[Annotation] = []
    log_lo, log_hi = np.log(config.min_scale), np.log(config.max_scale)
    for _ in range(n_objects):
        # second half of the budget only tries the smallest size, for crowded scenes
        for attempt in range(2 * config.max_retries):
            fallback = attempt >= config.max_retries
            side = float(np.exp(log_lo if fallback else rng.uniform(log_lo, log_hi)))
            aspect = float(np.exp(rng.uniform(-0.3, 0.3)))
            w = int(np.clip(round(side * aspect), 2, size))
            h = int(np.clip(round(side / aspect), 2, size))
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            if not _overlaps((x, y, w, h), placed, config.context_margin, size):
                break
        else:
            raise GenerationError(f"could not place object {len(placed) + 1} after {2 * config.max_retries} tries")
        label = int(rng.integers(config.num_classes))
        placed.append((x, y, w, h))
        annotations.append(Annotation((float(x), float(y), float(w), float(h)), label))

    # rings first so no ring paints over an object
    textures = []
    for (x, y, w, h), ann in zip(placed, annotations):
        code = ann.label % len(TEXTURES)
        if rng.uniform() >= config.context_prob:
            code = int(rng.integers(len(TEXTURES)))
        rx, ry, rw, rh = _expand((x, y, w, h), config.context_margin, size)
        image[:, ry:ry + rh, rx:rx + rw] += config.context_contrast * (code - 1)
        textures.append(TEXTURES[ann.label % len(TEXTURES)])
    for (x, y, w, h), ann, texture in zip(placed, annotations, textures):
        shape = SHAPES[ann.label // len(TEXTURES)]
        color = rng.uniform(0.45, 0.75, size=3)
        mask = _mask(shape, h, w)
        patch = color[:, None, None] + _texture(texture, h, w, config.texture_contrast)[None]
        region = image[:, y:y + h, x:x + w]
        region[:, mask] = patch[:, mask]

    image = image + config.noise * rng.standard_normal(image.shape)
    return Scene(np.clip(image, 0.0, 1.0), annotations)


def check_blur_size(size: int) -> int:
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ParameterError(f"blur kernel size must be an odd positive integer, got {size}")
    return int(size)


def blur_image(image: np.ndarray, size: int, mode: str = "reflect") -> np.ndarray:
    """Per-channel ``size x size`` mean filter; ``size == 1`` is the identity."""
    size = check_blur_size(size)
    image = np.asarray(image, dtype=np.float64)
    if size > min(image.shape[-2:]):
        raise ParameterError(f"blur kernel {size} exceeds image extent {image.shape[-2:]}")
    if size == 1:
        return image.copy()
    footprint = (1,) * (image.ndim - 2) + (size, size)
    return ndimage.uniform_filter(image, size=footprint, mode=mode)


def blur_scene(scene: Scene, size: int) -> Scene:
    # annotations are copied, never recomputed
    return Scene(blur_image(scene.image, size), list(scene.annotations), blur=check_blur_size(size))


def scene_seed(seed: int, index: int) -> Tuple[int, int]:
    return (int(seed), int(index))


def make_scenes(n: int, seed: int, config: SynthConfig = SynthConfig(), blur: int = 1) -> List[Scene]:
    return [blur_scene(synth_scene(scene_seed(seed, j), config), blur) for j in range(n)]


# ---------------------------------------------------------------- persistence
@dataclass
class Dataset:
    scenes: List[Scene]
    seed: int = 0
    blur: int = 1
    config: SynthConfig = field(default_factory=SynthConfig)
    digest: str = ""

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


def _index_document(n, blur, seed, config, scenes) -> dict:
    return {
        "version": INDEX_VERSION,
        "seed": int(seed),
        "blur": int(blur),
        "count": int(n),
        "config": asdict(config),
        "scenes": [
            {
                "file": f"scene_{j:05d}.flxt",
                "annotations": [{"box": list(a.box), "class": a.label} for a in s.annotations],
            }
            for j, s in enumerate(scenes)
        ],
    }


def index_digest(document: dict) -> str:
    payload = json.dumps(document, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()


def build_dataset(n: int, blur: int, seed: int, output_dir, config: SynthConfig = SynthConfig()) -> dict:
    """Generate ``n`` scenes, blur them and persist images plus an index.

    Returns the index document with an added ``digest`` entry. Output is
    staged in a sibling temporary directory and moved into place, so a
    failure leaves no partial dataset behind.
    """
    if n < 0:
        raise ParameterError(f"scene count must be >= 0, got {n}")
    blur = check_blur_size(blur)
    config.validate()
    output_dir = Path(output_dir)
    scenes = make_scenes(n, seed, config, blur)
    document = _index_document(n, blur, seed, config, scenes)
    try:
        output_dir.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".flexroi-", dir=output_dir.parent))
    except OSError as exc:
        raise PersistedStateError(f"cannot create dataset under {output_dir}: {exc}") from exc
    try:
        for record, scene in zip(document["scenes"], scenes):
            save_tensor(staging / record["file"], scene.image)
        with open(staging / INDEX_NAME, "w") as fh:
            json.dump(document, fh, indent=1, sort_keys=True)
        if output_dir.exists():
            shutil.rmtree(output_dir)
        os.replace(staging, output_dir)
    except OSError as exc:
        shutil.rmtree(staging, ignore_errors=True)
        raise PersistedStateError(f"failed writing dataset to {output_dir}: {exc}") from exc
    return dict(document, digest=index_digest(document))


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with open(path / INDEX_NAME) as fh:
            document = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistedStateError(f"cannot read dataset index in {path}: {exc}") from exc
    if document.get("version") != INDEX_VERSION:
        raise PersistedStateError(f"unsupported index version {document.get('version')}")
    config = SynthConfig(**document["config"])
    scenes = []
    for record in document["scenes"]:
        annotations = [Annotation(tuple(a["box"]), int(a["class"])) for a in record["annotations"]]
        scenes.append(Scene(load_tensor(path / record["file"]), annotations, blur=document["blur"]))
    return Dataset(scenes, document["seed"], document["blur"], config, index_digest(document))


def class_histogram(scenes: Sequence[Scene], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in scenes:
        for a in s.annotations:
            counts[a.label] += 1
    return counts
