"""Parameter initialization helpers (deterministic under a passed rng)."""

from __future__ import annotations

import math

import numpy as np


def glorot_normal(rng: np.random.Generator, shape: tuple[int, ...],
                  dtype) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[1] if len(shape) > 1 else shape[0]
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape).astype(dtype)


def zeros(shape: tuple[int, ...], dtype) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def ones(shape: tuple[int, ...], dtype) -> np.ndarray:
    return np.ones(shape, dtype=dtype)
