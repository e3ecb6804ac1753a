"""Central-difference verification of tape gradients.

The checker is the independent oracle for every gradient in the model: it
perturbs each parameter coordinate and compares the numeric slope against
the analytic gradient from one taped backward pass.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Parameter, Tape, Tensor, VERIFY_DTYPE


def finite_diff_check(loss_fn: Callable[[Tape | None], Tensor],
                      params: Sequence[Parameter],
                      epsilon: float = 1e-5) -> float:
    """Return the max relative error between analytic and numeric gradients.

    `loss_fn(tape)` must rebuild the forward pass from the parameters'
    current values; it is called with `None` for the (cheap) forward-only
    evaluations. Relative error per coordinate is
    |a - n| / max(1e-8, |a| + |n|). Requires 64-bit parameters.
    """
    for p in params:
        if p.value.dtype != VERIFY_DTYPE:
            raise ValueError(f"finite_diff_check needs float64 parameters, "
                             f"got {p.value.dtype} for {p.name}")
        if not p.trainable:
            raise ValueError(f"parameter {p.name} is frozen; check trainable ones only")
        p.zero_grad()

    tape = Tape()
    tape.backward(loss_fn(tape))
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + epsilon
            f_plus = float(loss_fn(None).data)
            flat[k] = saved - epsilon
            f_minus = float(loss_fn(None).data)
            flat[k] = saved
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(a_flat[k] - numeric) / max(1e-8, abs(a_flat[k]) + abs(numeric))
            if err > worst:
                worst = err
    return worst


def numeric_gradient(loss_fn: Callable[[], float], value: np.ndarray,
                     epsilon: float = 1e-5) -> np.ndarray:
    """Plain central-difference gradient of `loss_fn` w.r.t. `value` in place."""
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    g_flat = grad.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + epsilon
        f_plus = loss_fn()
        flat[k] = saved - epsilon
        f_minus = loss_fn()
        flat[k] = saved
        g_flat[k] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad
