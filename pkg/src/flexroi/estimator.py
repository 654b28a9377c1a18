"""scikit-learn style wrappers around the detector and the blur filter."""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .errors import ParameterError
from .evaluation import Detections, EvalReport
from .model import ModelConfig
from .synthgen import Annotation, Scene, blur_image, check_blur_size
from .trainer import TrainConfig, TrainResult, evaluate, predict, train


def check_images(X) -> np.ndarray:
    """Validate a batch of [3,H,W] images with values in [0, 1]."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    arr = np.asarray([np.asarray(x, dtype=np.float64) for x in X]) if not isinstance(X, np.ndarray) else X
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ParameterError(f"expected images shaped [n, 3, H, W], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("images contain non-finite values")
    return arr


def check_scenes(X, y=None) -> List[Scene]:
    """Accept a list of :class:`Scene` or images plus per-image (boxes, labels) pairs."""
    if y is None:
        scenes = list(X)
        if not all(isinstance(s, Scene) for s in scenes):
            raise ParameterError("without y, X must be a sequence of Scene objects")
        return scenes
    images = check_images(X)
    if len(y) != len(images):
        raise ParameterError(f"{len(images)} images but {len(y)} annotation entries")
    scenes = []
    for image, (boxes, labels) in zip(images, y):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        ann = [Annotation(tuple(map(float, b)), int(l)) for b, l in zip(boxes, labels)]
        scenes.append(Scene(image, ann))
    return scenes


class FlexDetector(BaseEstimator):
    """ROI classifier with multi-level fusion and feedback refinement.

    ``fit`` trains on scenes (or images plus ``(boxes, labels)`` targets),
    ``predict`` returns per-image :class:`Detections` for jittered
    ground-truth proposals and ``score`` returns COCO-style mAP.
    """

    def __init__(self, num_classes=6, levels=5, channels=64, pool_size=7, hidden=256, feedback_hidden=64,
                 delta=56.0, sigma=math.sqrt(2) / 2, gamma=0.5, ablation="+cls+img",
                 parameterization="interpolation", cascade_depth=1, epochs=12, batch_size=8, lr=0.01,
                 momentum=0.9, weight_decay=1e-4, random_state=0):
        self.num_classes = num_classes
        self.levels = levels
        self.channels = channels
        self.pool_size = pool_size
        self.hidden = hidden
        self.feedback_hidden = feedback_hidden
        self.delta = delta
        self.sigma = sigma
        self.gamma = gamma
        self.ablation = ablation
        self.parameterization = parameterization
        self.cascade_depth = cascade_depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        model = ModelConfig(
            num_classes=self.num_classes, levels=self.levels, channels=self.channels, pool_size=self.pool_size,
            hidden=self.hidden, feedback_hidden=self.feedback_hidden, delta=self.delta, sigma=self.sigma,
            gamma=self.gamma, ablation=self.ablation, parameterization=self.parameterization,
            cascade_depth=self.cascade_depth,
        )
        return TrainConfig(model=model, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           seed=int(self.random_state or 0)).validate()

    def fit(self, X, y=None, eval_scenes: Optional[Sequence[Scene]] = None) -> "FlexDetector":
        scenes = check_scenes(X, y)
        result: TrainResult = train(self._train_config(), scenes, eval_scenes)
        self.model_ = result.model
        self.history_ = result.rows
        self.n_features_in_ = 3
        return self

    def predict(self, X, y=None) -> List[Detections]:
        check_is_fitted(self, "model_")
        return predict(self.model_, check_scenes(X, y)).detections

    def predict_proba(self, X, y=None) -> np.ndarray:
        """Refined class probabilities, one row per proposal."""
        check_is_fitted(self, "model_")
        return predict(self.model_, check_scenes(X, y)).final_probs

    def evaluate(self, X, y=None) -> EvalReport:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_scenes(X, y))

    def score(self, X, y=None) -> float:
        return self.evaluate(X, y).map


class MeanBlur(TransformerMixin, BaseEstimator):
    """Stateless per-channel mean filter over [n, 3, H, W] images."""

    def __init__(self, size=5, mode="reflect"):
        self.size = size
        self.mode = mode

    def fit(self, X, y=None):
        check_blur_size(self.size)
        check_images(X)
        self.fitted_ = True
        return self

    def transform(self, X):
        if not getattr(self, "fitted_", False):
            raise NotFittedError("MeanBlur must be fitted before transform")
        images = check_images(X)
        return np.stack([blur_image(img, self.size, self.mode) for img in images])
