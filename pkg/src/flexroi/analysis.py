"""Blur response of image feedback and information gain of the refine stage."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ParameterError
from .model import FlexModel
from .synthgen import Scene, blur_image
from .trainer import predict

DEFAULT_KERNELS = (1, 5, 9, 21)

# published reference values, printed next to toy results for comparison only
REFERENCE_BLUR = {1: (0.8289, 1.1806), 5: (0.8175, 1.1855), 9: (0.7970, 1.2050), 21: (0.7768, 1.2223)}
REFERENCE_TOP10 = {1: (1.1477, 0.9897, 1.1806), 5: (1.0955, 1.0166, 1.1855), 9: (0.9910, 1.0768, 1.2050),
                   21: (0.8490, 1.1689, 1.2223)}


def _check_probs(p: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ParameterError("probabilities must be non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ParameterError("probabilities must sum to 1")
    return p


def entropy(probs) -> np.ndarray | float:
    """Shannon entropy in bits along the last axis, with 0 log 0 = 0."""
    p = _check_probs(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    h = terms.sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def information_gain(pre_probs, refine_probs):
    """Entropy drop from the pre-classification to the refined prediction, in bits."""
    return entropy(pre_probs) - entropy(refine_probs)


# ---------------------------------------------------------------- blur response
@dataclass
class BlurReport:
    kernels: List[int]
    first: List[float]
    last: List[float]
    count: int
    subset: str = "all"
    full_last: Optional[List[float]] = None
    metadata: Dict[str, object] = field(default_factory=dict)

    def row(self, kernel: int) -> tuple:
        i = self.kernels.index(kernel)
        return self.first[i], self.last[i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["kernel", "first_layer", "last_layer"]
        if self.full_last is not None:
            header.append("last_layer_avg")
        header += ["paper_first_layer", "paper_last_layer"]
        ref = REFERENCE_BLUR
        if self.full_last is not None:
            header.append("paper_last_layer_avg")
            ref = REFERENCE_TOP10
        w.writerow(header)
        width = len(next(iter(ref.values())))
        for i, k in enumerate(self.kernels):
            row = [k, f"{self.first[i]:.6f}", f"{self.last[i]:.6f}"]
            if self.full_last is not None:
                row.append(f"{self.full_last[i]:.6f}")
            row += list(ref.get(k, ("",) * width))
            w.writerow(row)
        return buf.getvalue()


def image_feedback_values(model: FlexModel, images: Sequence[np.ndarray], batch_size: int = 16) -> np.ndarray:
    """Image feedback [n, N] for a list of [3,H,W] images."""
    out = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack(images[start:start + batch_size])
            out.append(model.image_feedback(batch).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.levels))


def blur_response(model: FlexModel, scenes: Sequence[Scene], kernels: Sequence[int] = DEFAULT_KERNELS,
                  metadata: Optional[dict] = None) -> BlurReport:
    """Mean first- and last-level image feedback of ``scenes`` under each mean-kernel size."""
    firsts, lasts = [], []
    for x in kernels:
        phi = image_feedback_values(model, [blur_image(s.image, x) for s in scenes])
        firsts.append(float(np.mean(phi[:, 0])) if len(phi) else float("nan"))
        lasts.append(float(np.mean(phi[:, -1])) if len(phi) else float("nan"))
    meta = dict(metadata or {})
    return BlurReport(list(kernels), firsts, lasts, len(scenes), "all", None, meta)


def rank_by_first_level(model: FlexModel, scenes: Sequence[Scene]) -> np.ndarray:
    """Scene indices ordered by clean first-level image feedback, largest first (ties by index)."""
    phi = image_feedback_values(model, [s.image for s in scenes])
    return np.lexsort((np.arange(len(scenes)), -phi[:, 0]))


def top_fraction_blur_response(model: FlexModel, scenes: Sequence[Scene], fraction: float = 0.1,
                               kernels: Sequence[int] = DEFAULT_KERNELS,
                               metadata: Optional[dict] = None) -> BlurReport:
    """Blur response restricted to the scenes with the largest clean first-level feedback."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    scenes = list(scenes)
    keep = max(1, int(math.ceil(fraction * len(scenes) - 1e-9)))
    order = rank_by_first_level(model, scenes)[:keep]
    subset = [scenes[i] for i in sorted(order)]
    report = blur_response(model, subset, kernels, metadata)
    full = blur_response(model, scenes, kernels) if keep < len(scenes) else report
    report.full_last = list(full.last)
    report.subset = f"top-{fraction:g}"
    report.metadata["subset_size"] = keep
    report.metadata["selected"] = [int(i) for i in sorted(order)]
    if keep < 10:
        report.metadata["warning"] = f"subset has only {keep} scenes"
    return report


# ---------------------------------------------------------------- information gain
@dataclass
class InfoGainCurve:
    edges: np.ndarray
    mean: np.ndarray
    count: np.ndarray
    stderr: np.ndarray
    entropy_pre: np.ndarray
    gain: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def marked_bins(self) -> Dict[str, int]:
        """Bins containing the 2-way and 3-way confusion entropies."""
        return {name: int(np.clip(np.searchsorted(self.edges, v, side="right") - 1, 0, len(self.mean) - 1))
                for name, v in (("log2(2)", 1.0), ("log2(3)", math.log2(3)))}

    def quartile_means(self) -> tuple:
        """Mean gain among ROIs in the lowest and highest pre-entropy quartiles."""
        if len(self.gain) < 4:
            return float("nan"), float("nan")
        order = np.lexsort((np.arange(len(self.gain)), self.entropy_pre))
        q = len(order) // 4
        return float(self.gain[order[:q]].mean()), float(self.gain[order[-q:]].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count", "mean_ig", "stderr", "defined", "marker"])
        marks = {v: k for k, v in self.marked_bins.items()}
        for b in range(len(self.mean)):
            defined = self.count[b] > 0
            w.writerow([f"{self.edges[b]:.6f}", f"{self.edges[b + 1]:.6f}", int(self.count[b]),
                        f"{self.mean[b]:.6f}" if defined else "", f"{self.stderr[b]:.6f}" if defined else "",
                        int(defined), marks.get(b, "")])
        return buf.getvalue()


def bin_information_gain(entropy_pre: np.ndarray, gain: np.ndarray, num_classes: int, bins: int = 16
                         ) -> InfoGainCurve:
    edges = np.linspace(0.0, math.log2(num_classes), bins + 1)
    idx = np.clip(np.searchsorted(edges, entropy_pre, side="right") - 1, 0, bins - 1)
    mean = np.full(bins, np.nan)
    stderr = np.full(bins, np.nan)
    count = np.bincount(idx, minlength=bins)
    for b in range(bins):
        vals = gain[idx == b]
        if len(vals):
            mean[b] = vals.mean()
            stderr[b] = vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else float("inf")
    return InfoGainCurve(edges, mean, count, stderr, np.asarray(entropy_pre), np.asarray(gain))


def info_gain_curve(model: FlexModel, scenes: Sequence[Scene], bins: int = 16, seed: int = 1234,
                    metadata: Optional[dict] = None) -> InfoGainCurve:
    """Per-ROI (pre entropy, gain) pairs over every ground-truth-matched proposal, binned uniformly."""
    preds = predict(model, list(scenes), seed=seed)
    h_pre = entropy(preds.pre_probs) if len(preds.pre_probs) else np.zeros(0)
    gain = information_gain(preds.pre_probs, preds.final_probs) if len(preds.pre_probs) else np.zeros(0)
    curve = bin_information_gain(np.atleast_1d(h_pre), np.atleast_1d(gain), model.config.num_classes, bins)
    curve.metadata.update(metadata or {})
    return curve


# ---------------------------------------------------------------- output
def report_stem(kind: str, checkpoint_digest: str, blur: str) -> str:
    return f"{kind}_{checkpoint_digest[:12]}_{blur}"


def write_report(out_dir, kind: str, checkpoint_digest: str, blur: str, csv_text: str, summary: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = report_stem(kind, checkpoint_digest, blur)
    (out_dir / f"{stem}.csv").write_text(csv_text)
    (out_dir / f"{stem}.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=_jsonable))
    return out_dir / f"{stem}.csv"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)
