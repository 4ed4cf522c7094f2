"""Training objectives: dense detection loss and feature-distillation distances."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import spectral
from . import tensor as T
from .tensor import ShapeError, Tensor

LEVEL_NAMES = ("p3", "p4", "p5")
LEVEL_STRIDES = (4, 8, 16)

OBJ_WEIGHT = 1.0
CLS_WEIGHT = 0.5
BOX_WEIGHT = 2.0


class LossKind(str, Enum):
    FEATURE_MSE = "mse"
    FEATURE_SSIM = "ssim"
    SPECTRAL_PHASE = "spectral"


@dataclass(frozen=True)
class DistillLossConfig:
    """Which feature distance to use, on which levels, and how strongly.

    With ``normalize`` the distillation stage divides teacher and projected
    student maps of each level by the teacher's RMS activation on the
    training images, so the distance does not depend on the teacher's
    activation scale. The spectral distance is unaffected by it.
    """

    kind: LossKind = LossKind.FEATURE_MSE
    layers: tuple[bool, bool, bool] = (True, True, True)
    lambda_kd: float = 1.0
    lambda_amp: float = 0.0
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "layers", tuple(bool(v) for v in self.layers))
        if len(self.layers) != 3:
            raise ValueError("layers must have one toggle per level (p3, p4, p5)")
        if self.lambda_kd < 0 or self.lambda_amp < 0:
            raise ValueError("lambda_kd and lambda_amp must be non-negative")
        if self.lambda_kd > 0 and not any(self.layers):
            raise ValueError("at least one level must be toggled when lambda_kd > 0")

    @property
    def active_levels(self) -> list[int]:
        return [i for i, on in enumerate(self.layers) if on]


def _check_same(a, b, op: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


# ----------------------------------------------------------------------------
# distances


def mse_distance(a, b) -> Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    _check_same(a, b, "mse_distance")
    return T.mean(T.square(a - b))


def ssim_distance(a, b) -> Tensor:
    """``1 - SSIM`` using global statistics of each (sample, channel) map.

    The dynamic range ``L = max(|a|, |b|, 1)`` is treated as a constant.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    _check_same(a, b, "ssim_distance")
    if a.ndim != 4:
        raise ShapeError(f"ssim_distance expects NCHW maps, got shape {a.shape}")
    dyn = max(float(np.abs(a.data).max()), float(np.abs(b.data).max()), 1.0)
    c1 = (0.01 * dyn) ** 2
    c2 = (0.03 * dyn) ** 2
    mu_a = T.mean(a, axis=(2, 3), keepdims=True)
    mu_b = T.mean(b, axis=(2, 3), keepdims=True)
    da, db = a - mu_a, b - mu_b
    var_a = T.mean(T.square(da), axis=(2, 3), keepdims=True)
    var_b = T.mean(T.square(db), axis=(2, 3), keepdims=True)
    cov = T.mean(da * db, axis=(2, 3), keepdims=True)
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (T.square(mu_a) + T.square(mu_b) + c1) * (var_a + var_b + c2)
    return 1.0 - T.mean(num / den)


def spectral_distance(teacher_feat, student_feat, cfg: DistillLossConfig | None = None) -> Tensor:
    """Distance between per-channel spectra of teacher and projected student maps.

    The main term compares unit-modulus phase vectors bin by bin, so it is
    blind to any positive rescaling of either map. ``cfg.lambda_amp`` adds a
    log-amplitude term.
    """
    lambda_amp = cfg.lambda_amp if cfg is not None else 0.0
    t_data = teacher_feat.data if isinstance(teacher_feat, Tensor) else np.asarray(teacher_feat)
    s = T.as_tensor(student_feat)
    _check_same(t_data, s, "spectral_distance")
    t_spec = spectral.fft2(t_data)
    t_unit = spectral.unit_phase(t_spec)
    s_spec = spectral.fft2(s)
    s_unit = spectral.unit_phase(s_spec)
    dtype = s.data.dtype
    d_re = s_unit.re - t_unit.re.astype(dtype)
    d_im = s_unit.im - t_unit.im.astype(dtype)
    loss = T.mean(T.square(d_re) + T.square(d_im))
    if lambda_amp > 0:
        t_logamp = np.log1p(spectral.amplitude(t_spec)).astype(dtype)
        # tiny floor keeps d|z| finite at exactly-zero bins
        s_amp = T.sqrt(T.square(s_spec.re) + T.square(s_spec.im) + 1e-12)
        loss = loss + lambda_amp * T.mean(T.square(T.log1p(s_amp) - t_logamp))
    return loss


def distill_distance(teacher_feat, student_feat, cfg: DistillLossConfig) -> Tensor:
    if cfg.kind is LossKind.FEATURE_MSE:
        return mse_distance(T.as_tensor(teacher_feat).detach(), student_feat)
    if cfg.kind is LossKind.FEATURE_SSIM:
        return ssim_distance(T.as_tensor(teacher_feat).detach(), student_feat)
    return spectral_distance(teacher_feat, student_feat, cfg)


def stage_objective(task, distill_terms: Sequence, cfg: DistillLossConfig) -> Tensor:
    """``task + lambda_kd * mean(distill terms of toggled levels)``.

    ``distill_terms`` holds one entry per level; entries for untoggled
    levels are ignored and may be None.
    """
    task = T.as_tensor(task)
    if cfg.lambda_kd == 0:
        return task
    chosen = [distill_terms[i] for i in cfg.active_levels]
    total = chosen[0]
    for term in chosen[1:]:
        total = total + term
    return task + (cfg.lambda_kd / len(chosen)) * total


# ----------------------------------------------------------------------------
# detection


@dataclass
class LevelTargets:
    positive: np.ndarray      # (N, H, W) bool
    cls: np.ndarray           # (P,) int class of each positive cell
    ltrb: np.ndarray          # (P, 4) distances from cell centre to box sides, pixels
    index: tuple[np.ndarray, np.ndarray, np.ndarray]  # (n, i, j) of positives


def assign_level(box_w: float, box_h: float, image_size: int = 64) -> int:
    side = max(box_w, box_h)
    if side < image_size / 8:
        return 0
    if side < image_size / 4:
        return 1
    return 2


def build_targets(boxes: Sequence[np.ndarray], image_size: int = 64,
                  strides: Sequence[int] = LEVEL_STRIDES) -> list[LevelTargets]:
    """Centre-sampling assignment of ground-truth boxes to grid cells.

    ``boxes[n]`` is a ``(k, 5)`` array of ``x0, y0, x1, y1, class``. A cell is
    positive for a box when its centre lies inside the box and the box size
    maps to that level; overlaps go to the smaller box.
    """
    n_img = len(boxes)
    out = []
    for level, stride in enumerate(strides):
        g = image_size // stride
        owner_area = np.full((n_img, g, g), np.inf)
        owner = np.full((n_img, g, g), -1, dtype=np.int64)
        centres = (np.arange(g) + 0.5) * stride
        for n, bx in enumerate(boxes):
            bx = np.asarray(bx, dtype=np.float64).reshape(-1, 5)
            for k, (x0, y0, x1, y1, _) in enumerate(bx):
                if assign_level(x1 - x0, y1 - y0, image_size) != level:
                    continue
                inside_x = (centres > x0) & (centres < x1)
                inside_y = (centres > y0) & (centres < y1)
                if not inside_x.any():
                    inside_x = np.arange(g) == min(int((x0 + x1) / 2 // stride), g - 1)
                if not inside_y.any():
                    inside_y = np.arange(g) == min(int((y0 + y1) / 2 // stride), g - 1)
                area = (x1 - x0) * (y1 - y0)
                cell = inside_y[:, None] & inside_x[None, :] & (area < owner_area[n])
                owner_area[n][cell] = area
                owner[n][cell] = k
        positive = owner >= 0
        nn, ii, jj = np.nonzero(positive)
        cls = np.zeros(len(nn), dtype=np.int64)
        ltrb = np.zeros((len(nn), 4))
        for p, (n, i, j) in enumerate(zip(nn, ii, jj)):
            x0, y0, x1, y1, c = np.asarray(boxes[n], dtype=np.float64).reshape(-1, 5)[owner[n, i, j]]
            cx, cy = centres[j], centres[i]
            cls[p] = int(c)
            ltrb[p] = (cx - x0, cy - y0, x1 - cx, y1 - cy)
        out.append(LevelTargets(positive, cls, np.maximum(ltrb, 1e-3), (nn, ii, jj)))
    return out


def _gather_cells(pred: Tensor, index) -> Tensor:
    """Rows ``pred[n, :, i, j]`` for each indexed cell, shape ``(P, C)``."""
    nn, ii, jj = index

    def bw(g):
        full = np.zeros_like(pred.data)
        np.add.at(full, (nn, slice(None), ii, jj), g)
        return (full,)

    return T._record(pred.data[nn, :, ii, jj], (pred,), bw)


def box_iou_loss(raw: Tensor, target_ltrb: np.ndarray, stride: float) -> Tensor:
    """Mean ``1 - IoU`` between predicted and target ltrb boxes sharing a centre.

    ``raw`` holds log-distances in stride units, shape ``(P, 4)``.
    """
    dist = T.exp(raw) * float(stride)
    tgt = np.asarray(target_ltrb, dtype=raw.data.dtype)
    l, t, r, b = (T.take_channels(dist, k, k + 1) for k in range(4))
    gl, gt, gr, gb = (tgt[:, k:k + 1] for k in range(4))
    pred_area = (l + r) * (t + b)
    gt_area = (gl + gr) * (gt + gb)
    inter = (T.minimum(l, gl) + T.minimum(r, gr)) * (T.minimum(t, gt) + T.minimum(b, gb))
    iou = inter / (pred_area + gt_area - inter)
    return T.mean(1.0 - iou)


def detection_loss(predictions: Sequence[Tensor], targets, num_classes: int = 3,
                   image_size: int = 64) -> Tensor:
    """Dense anchor-free detection loss.

    Args:
        predictions: One ``(N, 1 + num_classes + 4, H, W)`` map per level:
            objectness logit, class logits, log box distances.
        targets: Either per-image ``(k, 5)`` box arrays or the output of
            :func:`build_targets`.

    Returns:
        ``1.0 * objectness BCE (mean over all cells) + 0.5 * class BCE
        (summed over classes, mean over positives) + 2.0 * (1 - IoU)``.
    """
    if targets and not isinstance(targets[0], LevelTargets):
        targets = build_targets(targets, image_size=image_size)
    n_img = predictions[0].shape[0]
    total_cells = sum(p.shape[2] * p.shape[3] for p in predictions) * n_img
    obj_sum = None
    cls_terms, box_terms, n_pos = [], [], 0
    for level, (pred, tg) in enumerate(zip(predictions, targets)):
        if pred.shape[1] != 1 + num_classes + 4:
            raise ShapeError(f"prediction map has {pred.shape[1]} channels, expected {5 + num_classes - 1}")
        obj = T.take_channels(pred, 0, 1)
        bce = T.sum(T.bce_with_logits(obj, tg.positive[:, None].astype(pred.data.dtype)))
        obj_sum = bce if obj_sum is None else obj_sum + bce
        if len(tg.cls):
            cells = _gather_cells(pred, tg.index)
            onehot = np.eye(num_classes, dtype=pred.data.dtype)[tg.cls]
            cls_logits = T.take_channels(cells, 1, 1 + num_classes)
            cls_terms.append(T.sum(T.bce_with_logits(cls_logits, onehot)))
            raw_box = T.take_channels(cells, 1 + num_classes, 5 + num_classes)
            box_terms.append(box_iou_loss(raw_box, tg.ltrb, LEVEL_STRIDES[level]) * float(len(tg.cls)))
            n_pos += len(tg.cls)
    loss = obj_sum * (OBJ_WEIGHT / total_cells)
    if n_pos:
        cls_total, box_total = cls_terms[0], box_terms[0]
        for c, bx in zip(cls_terms[1:], box_terms[1:]):
            cls_total = cls_total + c
            box_total = box_total + bx
        loss = loss + cls_total * (CLS_WEIGHT / n_pos) + box_total * (BOX_WEIGHT / n_pos)
    return loss
