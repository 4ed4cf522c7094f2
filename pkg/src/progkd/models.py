"""Three-scale toy FPN detectors, the channel projector, and box decoding."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .losses import LEVEL_STRIDES
from .tensor import Parameter, ShapeError, Tensor

IMAGE_SIZE = 64
NEG_SLOPE = 0.1


class Scale(str, Enum):
    TINY = "tiny"
    JUNIOR = "junior"
    SENIOR = "senior"

    @property
    def base_channels(self) -> int:
        return {"tiny": 16, "junior": 32, "senior": 48}[self.value]

    @property
    def rank(self) -> int:
        return ("tiny", "junior", "senior").index(self.value)


@dataclass(frozen=True)
class DetectorSpec:
    scale: Scale
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale", Scale(self.scale))
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def widths(self) -> tuple[int, int, int]:
        c = self.scale.base_channels
        return c, 2 * c, 4 * c


def _he(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / ((1.0 + NEG_SLOPE ** 2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(np.float32)


@dataclass
class Features:
    levels: list[Tensor]        # P3, P4, P5
    predictions: list[Tensor]   # per-level (N, 5 + classes - 1, H, W)


class Detector:
    """Stem, three stride-2 stages, top-down FPN merge, 1x1 heads.

    Layer table (``c`` = base width)::

        stem   3x3/2   3   -> c/2   32x32
        down3  3x3/2   c/2 -> c     16x16
        conv3  3x3/1   c   -> c     16x16  (C3)
        down4  3x3/2   c   -> 2c     8x8   (C4)
        down5  3x3/2   2c  -> 4c     4x4   (C5)
        lat5   1x1     4c  -> 4c     4x4   P5
        merge4 3x3     2c+4c -> 2c   8x8   P4
        merge3 3x3     c+2c  -> c    16x16 P3
        head*  1x1     level -> 1 + classes + 4
    """

    def __init__(self, spec: DetectorSpec):
        self.spec = spec
        c3, c4, c5 = spec.widths
        half = max(c3 // 2, 1)
        out_ch = 1 + spec.num_classes + 4
        layout = [
            ("stem", half, 3, 3),
            ("down3", c3, half, 3),
            ("conv3", c3, c3, 3),
            ("down4", c4, c3, 3),
            ("down5", c5, c4, 3),
            ("lat5", c5, c5, 1),
            ("merge4", c4, c4 + c5, 3),
            ("merge3", c3, c3 + c4, 3),
            ("head3", out_ch, c3, 1),
            ("head4", out_ch, c4, 1),
            ("head5", out_ch, c5, 1),
        ]
        rng = np.random.default_rng(spec.seed)
        self.params: dict[str, Parameter] = {}
        for name, o, i, k in layout:
            w = _he(rng, (o, i, k, k))
            b = np.zeros(o, dtype=np.float32)
            if name.startswith("head"):
                w *= 0.1
                b[0] = -4.0
                b[1 + spec.num_classes:] = -0.5
            self.params[f"{name}.weight"] = Parameter(w, name=f"{name}.weight")
            self.params[f"{name}.bias"] = Parameter(b, name=f"{name}.bias")

    # -- parameters

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def freeze(self, frozen: bool = True) -> None:
        for p in self.params.values():
            p.frozen = frozen

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.params.items():
            key = prefix + k
            if key not in state:
                raise KeyError(f"checkpoint lacks parameter {key!r}")
            if state[key].shape != p.data.shape:
                raise ShapeError(f"{key}: checkpoint shape {state[key].shape} != model {p.data.shape}")
            p.data = np.array(state[key], dtype=np.float32)

    # -- forward

    def _conv(self, x: Tensor, name: str, stride: int = 1, act: bool = True) -> Tensor:
        w = self.params[f"{name}.weight"]
        k = w.shape[-1]
        y = T.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, pad=k // 2)
        return T.leaky_relu(y, NEG_SLOPE) if act else y

    def forward(self, x) -> Features:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"detector input must be N x 3 x {IMAGE_SIZE} x {IMAGE_SIZE}, got {x.shape}")
        h = self._conv(x, "stem", stride=2)
        h = self._conv(h, "down3", stride=2)
        c3 = self._conv(h, "conv3")
        c4 = self._conv(c3, "down4", stride=2)
        c5 = self._conv(c4, "down5", stride=2)
        p5 = self._conv(c5, "lat5")
        p4 = self._conv(T.concat_channels(c4, T.upsample2_nearest(p5)), "merge4")
        p3 = self._conv(T.concat_channels(c3, T.upsample2_nearest(p4)), "merge3")
        levels = [p3, p4, p5]
        preds = [self._conv(f, f"head{i + 3}", act=False) for i, f in enumerate(levels)]
        return Features(levels, preds)

    __call__ = forward


def build_detector(spec: DetectorSpec) -> Detector:
    return Detector(spec)


class Projector:
    """One 1x1 convolution per level mapping learner widths to teacher widths.

    Overlapping channels start as identity; extra teacher channels start
    from small random weights.
    """

    def __init__(self, in_widths: Sequence[int], out_widths: Sequence[int], seed: int = 0):
        if len(in_widths) != len(out_widths):
            raise ValueError("projector needs one width pair per level")
        rng = np.random.default_rng(seed + 7919)
        self.in_widths = tuple(in_widths)
        self.out_widths = tuple(out_widths)
        self.params: dict[str, Parameter] = {}
        for lvl, (ci, co) in enumerate(zip(in_widths, out_widths)):
            w = np.zeros((co, ci, 1, 1), dtype=np.float32)
            k = min(ci, co)
            w[:k, :k, 0, 0] = np.eye(k, dtype=np.float32)
            if co > ci:
                w[ci:, :, 0, 0] = (rng.standard_normal((co - ci, ci)) * 0.01).astype(np.float32)
            self.params[f"p{lvl + 3}.weight"] = Parameter(w, name=f"p{lvl + 3}.weight")
            self.params[f"p{lvl + 3}.bias"] = Parameter(np.zeros(co, dtype=np.float32), name=f"p{lvl + 3}.bias")

    @classmethod
    def between(cls, learner: Detector, teacher: Detector, seed: int = 0) -> "Projector":
        return cls(learner.spec.widths, teacher.spec.widths, seed)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: p.data.copy() for k, p in self.params.items()}

    def project(self, feats: Sequence[Tensor], levels: Iterable[int] | None = None) -> list[Tensor | None]:
        """Map learner features to teacher widths; skipped levels come back as None."""
        levels = range(len(feats)) if levels is None else set(levels)
        out: list[Tensor | None] = []
        for lvl, f in enumerate(feats):
            if lvl not in levels:
                out.append(None)
                continue
            if f.shape[1] != self.in_widths[lvl]:
                raise ShapeError(f"level P{lvl + 3}: projector expects {self.in_widths[lvl]} channels, got {f.shape[1]}")
            out.append(T.conv2d(f, self.params[f"p{lvl + 3}.weight"], self.params[f"p{lvl + 3}.bias"]))
        return out

    __call__ = project


# ----------------------------------------------------------------------------
# decoding


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    cls: int
    score: float


def _sig(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def decode_predictions(predictions: Sequence, conf_threshold: float = 0.05, num_classes: int = 3,
                       image_size: int = IMAGE_SIZE, max_det: int = 100) -> list[list[Detection]]:
    """Turn per-level prediction maps into scored boxes, one list per image.

    Score is ``sigmoid(objectness) * sigmoid(best class logit)``; boxes are
    clipped to the image.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    maps = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in predictions]
    n_img = maps[0].shape[0]
    results: list[list[Detection]] = []
    for n in range(n_img):
        rows = []
        for lvl, pm in enumerate(maps):
            stride = LEVEL_STRIDES[lvl]
            obj = _sig(pm[n, 0].astype(np.float64))
            cls_p = _sig(pm[n, 1:1 + num_classes].astype(np.float64))
            best = cls_p.argmax(axis=0)
            score = obj * cls_p.max(axis=0)
            ii, jj = np.nonzero(score >= conf_threshold)
            if not len(ii):
                continue
            dist = np.exp(np.clip(pm[n][1 + num_classes:5 + num_classes][:, ii, jj].astype(np.float64), -20, 10)) * stride
            cx = (jj + 0.5) * stride
            cy = (ii + 0.5) * stride
            boxes = np.stack([cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]], axis=1)
            boxes = np.clip(boxes, 0.0, image_size)
            rows.append(np.column_stack([boxes, best[ii, jj], score[ii, jj]]))
        if not rows:
            results.append([])
            continue
        arr = np.concatenate(rows)
        arr = arr[np.argsort(-arr[:, 5], kind="stable")][:max_det * 10]
        results.append([Detection(tuple(r[:4]), int(r[4]), float(r[5])) for r in arr])
    return results


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5, max_det: int = 100) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a higher-scored one."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = sorted(range(len(detections)), key=lambda k: -detections[k].score)
    boxes = np.array([detections[k].box for k in order]).reshape(-1, 4)
    classes = np.array([detections[k].cls for k in order])
    alive = np.ones(len(order), dtype=bool)
    kept: list[Detection] = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(detections[order[pos]])
        if len(kept) == max_det:
            break
        rest = np.nonzero(alive[pos + 1:] & (classes[pos + 1:] == classes[pos]))[0] + pos + 1
        if len(rest):
            ious = box_iou(boxes[pos:pos + 1], boxes[rest])[0]
            alive[rest[ious > iou_threshold]] = False
    return kept


def detect(model: Detector, images: np.ndarray, conf_threshold: float = 0.05,
           iou_threshold: float = 0.5, batch_size: int = 64) -> list[list[Detection]]:
    out: list[list[Detection]] = []
    with T.no_record():
        for start in range(0, len(images), batch_size):
            feats = model.forward(images[start:start + batch_size])
            decoded = decode_predictions(feats.predictions, conf_threshold, model.spec.num_classes)
            out.extend(nms(d, iou_threshold) for d in decoded)
    return out
