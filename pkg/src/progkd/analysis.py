"""Representation similarity between trained detectors."""

from __future__ import annotations

import csv
import io
from itertools import combinations
from typing import Mapping

import numpy as np

from . import tensor as T
from .models import Detector
from .similarity import linear_cka, pooled_features

LEVELS = ("p3", "p4", "p5")


def level_features(model: Detector, images: np.ndarray, batch_size: int = 64) -> list[np.ndarray]:
    """Neck outputs for ``images``, one ``(N, C, H, W)`` array per level."""
    chunks: list[list[np.ndarray]] = [[], [], []]
    with T.no_record():
        for start in range(0, len(images), batch_size):
            for lvl, f in enumerate(model.forward(images[start:start + batch_size]).levels):
                chunks[lvl].append(f.data)
    return [np.concatenate(c) for c in chunks]


def feature_matrices(levels: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Flattened per-level maps plus ``pooled``, the channel means of all levels."""
    out = {name: f.reshape(len(f), -1) for name, f in zip(LEVELS, levels)}
    out["pooled"] = pooled_features(levels)
    return out


def pairwise_cka(models: Mapping[str, Detector], images: np.ndarray) -> list[dict]:
    """Linear CKA for every model pair, per level and pooled.

    Returns rows ``{"a", "b", "view", "cka"}`` in insertion order of ``models``.
    """
    feats = {name: feature_matrices(level_features(m, images)) for name, m in models.items()}
    rows = []
    for a, b in combinations(models, 2):
        for view in (*LEVELS, "pooled"):
            rows.append({"a": a, "b": b, "view": view, "cka": linear_cka(feats[a][view], feats[b][view])})
    return rows


def cka_lookup(rows, view: str = "p3") -> dict[frozenset, float]:
    return {frozenset((r["a"], r["b"])): r["cka"] for r in rows if r["view"] == view}


def level_mean_cka(rows, a: str, b: str) -> float:
    """Mean over P3-P5 of the flattened-map CKA between ``a`` and ``b``."""
    key = frozenset((a, b))
    return float(np.mean([cka_lookup(rows, v)[key] for v in LEVELS]))


def cka_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["a", "b", "view", "cka"])
    for r in rows:
        writer.writerow([r["a"], r["b"], r["view"], repr(float(r["cka"]))])
    return buf.getvalue()


__all__ = ["LEVELS", "cka_lookup", "cka_to_csv", "feature_matrices", "level_features", "level_mean_cka",
           "pairwise_cka"]
