"""Linear centered kernel alignment between two sets of representations."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


class DegenerateInputError(ValueError):
    """Raised when a representation has no variance across samples."""


def gram_linear(x: np.ndarray) -> np.ndarray:
    """Linear kernel ``X @ X.T`` for an ``(n, d)`` feature matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {x.shape}")
    return x @ x.T


def center_gram(k: np.ndarray) -> np.ndarray:
    """Double-center a Gram matrix, ``H K H`` with ``H = I - 11^T / n``."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError(f"center_gram expects a square matrix, got shape {k.shape}")
    k = k - k.mean(axis=0, keepdims=True)
    return k - k.mean(axis=1, keepdims=True)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA with the biased HSIC estimator.

    ``x`` and ``y`` must share the sample count; feature widths may differ.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"linear_cka expects 2-D inputs, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ShapeError("linear_cka needs at least two samples")
    k, l = gram_linear(x), gram_linear(y)
    kc, lc = center_gram(k), center_gram(l)
    hsic_kl = float((kc * lc).sum())
    hsic_kk = float((kc * kc).sum())
    hsic_ll = float((lc * lc).sum())
    # relative floor: centering a constant representation leaves only rounding
    if hsic_kk <= 1e-20 * max(float((k * k).sum()), 1e-300) or \
            hsic_ll <= 1e-20 * max(float((l * l).sum()), 1e-300):
        raise DegenerateInputError("representation is constant across samples")
    return float(np.clip(hsic_kl / np.sqrt(hsic_kk * hsic_ll), 0.0, 1.0))


def pooled_features(levels) -> np.ndarray:
    """Global-average-pool NCHW maps and concatenate them into ``(N, sum C)``."""
    return np.concatenate([np.asarray(f, dtype=np.float64).mean(axis=(2, 3)) for f in levels], axis=1)
