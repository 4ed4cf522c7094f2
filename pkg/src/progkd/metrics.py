"""COCO-style average precision over a set of images."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import Detection, box_iou

COCO_IOUS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class APResult:
    ap50: float
    ap75: float
    map: float
    per_class: dict[float, list[float]]


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated area under a precision-recall curve."""
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def match_detections(dets: Sequence[Detection], gts: np.ndarray, cls: int, iou_threshold: float):
    """Greedy matching for one image and class.

    Detections are visited in descending score order; each takes the
    highest-IoU ground truth not yet claimed, if that IoU reaches the
    threshold. Returns ``(scores, is_true_positive)``.
    """
    mine = sorted((d for d in dets if d.cls == cls), key=lambda d: -d.score)
    gt_boxes = gts[gts[:, 4] == cls, :4] if len(gts) else np.zeros((0, 4))
    scores = np.array([d.score for d in mine])
    tp = np.zeros(len(mine), dtype=bool)
    if not len(mine) or not len(gt_boxes):
        return scores, tp
    ious = box_iou(np.array([d.box for d in mine]), gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for k in range(len(mine)):
        cand = np.where(taken, -1.0, ious[k])
        best = int(cand.argmax())
        if cand[best] >= iou_threshold:
            taken[best] = True
            tp[k] = True
    return scores, tp


def class_ap(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[np.ndarray],
             cls: int, iou_threshold: float) -> float:
    """AP for one class; NaN when the class has no ground truth."""
    n_gt = sum(int((np.asarray(g).reshape(-1, 5)[:, 4] == cls).sum()) for g in ground_truth)
    if n_gt == 0:
        return float("nan")
    all_scores, all_tp = [], []
    for dets, gts in zip(detections, ground_truth):
        s, tp = match_detections(dets, np.asarray(gts).reshape(-1, 5), cls, iou_threshold)
        all_scores.append(s)
        all_tp.append(tp)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    if not len(scores):
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    return interpolated_ap(recall, precision)


def average_precision(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[np.ndarray],
                      num_classes: int = 3, iou_thresholds: Sequence[float] = COCO_IOUS) -> APResult:
    """AP@0.5, AP@0.75 and mAP averaged over IoU thresholds and classes.

    Classes without ground truth are left out of every mean.

    Raises:
        ValueError: On an empty image set or mismatched list lengths.
    """
    if not len(ground_truth):
        raise ValueError("cannot evaluate on an empty dataset")
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    thresholds = sorted(set(float(t) for t in iou_thresholds) | {0.5, 0.75})
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"IoU threshold {t} outside (0, 1)")
    per = {t: [class_ap(detections, ground_truth, c, t) for c in range(num_classes)] for t in thresholds}

    def mean_of(values):
        vals = [v for v in values if not np.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    ap_grid = [v for t in iou_thresholds for v in per[float(t)]]
    return APResult(mean_of(per[0.5]), mean_of(per[0.75]), mean_of(ap_grid), per)
