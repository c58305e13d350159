"""Adam on plain numpy arrays and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr: float, t: int, total: int) -> float:
    """0.5 * base_lr * (1 + cos(pi * t / total))."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total))


class Adam:
    """Adam with bias correction, updating arrays in place."""

    def __init__(self, shapes, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step_count = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
