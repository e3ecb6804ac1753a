"""Decoupled-weight-decay Adam and the warmup + cosine schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .numcore import Parameter


class AdamW:
    """Adam with decoupled weight decay over the trainable parameters.

    The step learning rate is supplied per call so an external schedule
    stays in charge; frozen parameters are never touched, including by
    weight decay.
    """

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in self.params}
        self._v = {p.name: np.zeros_like(p.value) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= lr * (update + self.weight_decay * p.value)


def warmup_cosine_lr(step: int, total_steps: int, peak_lr: float,
                     warmup_fraction: float) -> float:
    """Linear ramp from zero over the first `warmup_fraction` of steps,
    cosine decay to zero afterwards. Step 0 yields 0; the first
    post-warmup step yields the peak."""
    warmup = max(1, int(round(total_steps * warmup_fraction)))
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps <= warmup:
        return peak_lr
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
