"""Adam with bias correction and a per-epoch cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Parameter

ADAM_BETA1 = 0.937
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_states(params: Sequence[Parameter], beta1: float = ADAM_BETA1,
                beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> list[AdamState]:
    return [AdamState(np.zeros_like(p.data), np.zeros_like(p.data), 0, beta1, beta2, eps) for p in params]


def adam_step(params: Sequence[Parameter], states: Sequence[AdamState], lr: float) -> None:
    """Apply one bias-corrected Adam update in place.

    Frozen parameters and parameters without a gradient are skipped; their
    state does not advance.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p, s in zip(params, states):
        if p.frozen or p.grad is None:
            continue
        g = p.grad
        s.t += 1
        s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
        s.v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
        m_hat = s.m / (1.0 - s.beta1 ** s.t)
        v_hat = s.v / (1.0 - s.beta2 ** s.t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.data.dtype)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """``lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs))``, no warmup, floor 0."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class Adam:
    """Thin stateful wrapper pairing parameters with their Adam states."""

    params: list[Parameter]
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = init_states(self.params, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step(self.params, self.states, lr)
