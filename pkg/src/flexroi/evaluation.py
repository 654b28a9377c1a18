"""COCO-style average precision for axis-aligned (x, y, w, h) boxes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Detections:
    """Detections for one image: boxes [D,4] (x, y, w, h), scores [D], labels [D]."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    map: float
    per_class: Dict[int, float]
    per_threshold: Dict[float, float]
    fallbacks: int = 0
    metadata: Dict[str, str] = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"mAP": self.map, "AP50": self.ap50, "AP75": self.ap75, "fallbacks": self.fallbacks}


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags sorted by descending score."""
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    # precision envelope, non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def class_ap(detections: Sequence[Detections], gt_boxes: Sequence[np.ndarray], gt_labels: Sequence[np.ndarray],
             label: int, threshold: float) -> float:
    """Greedy confidence-ordered matching for one class at one IoU threshold."""
    entries = []
    for img, det in enumerate(detections):
        sel = np.flatnonzero(det.labels == label)
        entries.extend((float(det.scores[s]), img, int(s)) for s in sel)
    num_gt = int(sum(int((np.asarray(l) == label).sum()) for l in gt_labels))
    # stable ordering: score descending, then image, then detection index
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    matched = [np.zeros(int((np.asarray(l) == label).sum()), dtype=bool) for l in gt_labels]
    gts = [np.asarray(b).reshape(-1, 4)[np.asarray(l) == label] for b, l in zip(gt_boxes, gt_labels)]
    tp = np.zeros(len(entries))
    for n, (_, img, s) in enumerate(entries):
        g = gts[img]
        if len(g) == 0:
            continue
        ious = box_iou(detections[img].boxes[s], g)[0]
        ious[matched[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= threshold:
            matched[img][best] = True
            tp[n] = 1.0
    return interpolated_ap(tp, num_gt)


def evaluate_detections(detections: Sequence[Detections], gt_boxes: Sequence[np.ndarray],
                        gt_labels: Sequence[np.ndarray], num_classes: int, fallbacks: int = 0) -> EvalReport:
    table = np.full((len(IOU_THRESHOLDS), num_classes), np.nan)
    for ti, thr in enumerate(IOU_THRESHOLDS):
        for c in range(num_classes):
            table[ti, c] = class_ap(detections, gt_boxes, gt_labels, c, float(thr))
    present = ~np.all(np.isnan(table), axis=0)
    if not present.any():
        per_thr = np.zeros(len(IOU_THRESHOLDS))
    else:
        per_thr = np.nanmean(table[:, present], axis=1)
    per_class = {c: float(np.mean(table[:, c])) for c in range(num_classes) if present[c]}
    return EvalReport(
        ap50=float(per_thr[0]),
        ap75=float(per_thr[5]),
        map=float(per_thr.mean()),
        per_class=per_class,
        per_threshold={float(t): float(v) for t, v in zip(IOU_THRESHOLDS, per_thr)},
        fallbacks=fallbacks,
    )
