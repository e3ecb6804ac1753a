"""Dense tensor ops with reverse-mode gradients on a recording tape.

The op set is exactly what the alignment model needs: 2-D matmul plus a
handful of elementwise / reduction / indexing ops. Every op validates that
its output is finite and, when a tape is active, records a closure that
adds exact adjoints into its inputs' gradient buffers. Replaying the tape
in reverse recording order is a valid topological order because an output
can only be consumed by ops recorded after it.

Reductions go through numpy, whose summation order is fixed for a given
shape/dtype, so results are bit-reproducible per precision mode.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64

_NEG_INF_FILL = -1e30  # additive mask value; exp() underflows to exactly 0.0


class NonFiniteValueError(ArithmeticError):
    """An op produced NaN or Inf."""


class TapeReplayError(RuntimeError):
    """backward() called on an already-consumed tape."""


class Tape:
    """Wengert list: ops append adjoint closures during the forward pass."""

    def __init__(self) -> None:
        self._steps: list[Callable[[], None]] = []
        self._consumed = False

    def record(self, step: Callable[[], None]) -> None:
        self._steps.append(step)

    def backward(self, loss: "Tensor") -> None:
        if self._consumed:
            raise TapeReplayError("tape already replayed; re-record the forward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.ensure_grad()[...] = 1.0
        for step in reversed(self._steps):
            step()


class Tensor:
    """Array value plus (lazily allocated) gradient buffer and owning tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data: np.ndarray, tape: Tape | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter:
    """Named leaf with a persistent gradient buffer and a trainable flag.

    Gradients accumulate with += across backward passes until zero_grad().
    Frozen parameters never receive gradient, even when used in a loss.
    """

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = trainable

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def tensor(self, tape: Tape | None) -> Tensor:
        """Leaf tensor sharing this parameter's storage.

        Recorded first, so its accumulation step runs last during replay.
        """
        t = Tensor(self.value, tape)
        if tape is not None and self.trainable:
            def _accumulate() -> None:
                if t.grad is not None:
                    self.grad += t.grad
            tape.record(_accumulate)
        return t

    def __repr__(self) -> str:  # pragma: no cover
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {flag})"


def constant(values, like: Tensor | None = None, dtype=None) -> Tensor:
    """Wrap raw values as an untracked tensor (receives no gradient)."""
    if dtype is None:
        dtype = like.dtype if like is not None else VERIFY_DTYPE
    return Tensor(np.asarray(values, dtype=dtype), tape=None)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{op} produced a non-finite value")


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a: Tensor, b: Tensor, out_data: np.ndarray, name: str,
            da: Callable[[np.ndarray], np.ndarray],
            db: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    _check_finite(out_data, name)
    tape = _tape_of(a, b)
    out = Tensor(out_data, tape)
    if tape is not None:
        def _bw() -> None:
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                a.ensure_grad()[...] += _unbroadcast(da(g), a.data.shape)
            if b.tape is not None:
                b.ensure_grad()[...] += _unbroadcast(db(g), b.data.shape)
        tape.record(_bw)
    return out


def _unary(x: Tensor, out_data: np.ndarray, name: str,
           dx: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    _check_finite(out_data, name)
    out = Tensor(out_data, x.tape)
    if x.tape is not None:
        def _bw() -> None:
            g = out.grad
            if g is None:
                return
            x.ensure_grad()[...] += dx(g)
        x.tape.record(_bw)
    return out


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data + b.data, "add", lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data - b.data, "sub", lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data * b.data, "mul",
                   lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    return _binary(a, b, out_data, "div",
                   lambda g: g / b.data, lambda g: -g * a.data / (b.data * b.data))


def neg(x: Tensor) -> Tensor:
    return _unary(x, -x.data, "neg", lambda g: -g)


def scale(x: Tensor, c: float) -> Tensor:
    return _unary(x, x.data * c, "scale", lambda g: g * c)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return _unary(x, out_data, "exp", lambda g: g * out_data)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)
    return _unary(x, out_data, "log", lambda g: g / x.data)


def relu(x: Tensor) -> Tensor:
    return _unary(x, np.maximum(x.data, 0.0), "relu",
                  lambda g: g * (x.data > 0))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out_data = np.where(x.data > 0, x.data, slope * x.data)
    return _unary(x, out_data, "leaky_relu",
                  lambda g: g * np.where(x.data > 0, 1.0, slope))


def abs_(x: Tensor) -> Tensor:
    return _unary(x, np.abs(x.data), "abs", lambda g: g * np.sign(x.data))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    # tie goes to the first operand
    take_a = a.data <= b.data
    return _binary(a, b, np.where(take_a, a.data, b.data), "minimum",
                   lambda g: g * take_a, lambda g: g * ~take_a)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return _binary(a, b, a.data @ b.data, "matmul",
                   lambda g: g @ b.data.T, lambda g: a.data.T @ g)


def transpose(x: Tensor) -> Tensor:
    return _unary(x, x.data.T.copy(), "transpose", lambda g: g.T)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.data.shape
    return _unary(x, x.data.reshape(shape).copy(), "reshape",
                  lambda g: g.reshape(orig))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    _check_finite(out_data, "concat")
    tape = _tape_of(*parts)
    out = Tensor(out_data, tape)
    if tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def _bw() -> None:
            g = out.grad
            if g is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.tape is not None:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    p.ensure_grad()[...] += g[tuple(sl)]
        tape.record(_bw)
    return out


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    def _bw(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return full
    return _unary(x, x.data[:, lo:hi].copy(), "slice_cols", _bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    def _bw(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return full
    return _unary(x, x.data[idx].copy(), "gather_rows", _bw)


def scatter_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of `base` with rows at `idx` replaced by `rows` (same order)."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = base.data.copy()
    out_data[idx] = rows.data
    def _dbase(g: np.ndarray) -> np.ndarray:
        masked = g.copy()
        masked[idx] = 0.0
        return masked
    return _binary(base, rows, out_data, "scatter_rows",
                   _dbase, lambda g: g[idx])


def diag_part(x: Tensor) -> Tensor:
    n = min(x.data.shape)
    def _bw(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(x.data)
        full[np.arange(n), np.arange(n)] = g
        return full
    return _unary(x, np.diagonal(x.data).copy(), "diag_part", _bw)


# ---------------------------------------------------------------------------
# reductions and normalizations

def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    out_data = x.data.sum(axis=axis)
    def _bw(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy()
    return _unary(x, out_data, "reduce_sum", _bw)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out_data = x.data.mean(axis=axis)
    def _bw(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g / n, x.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy()
    return _unary(x, out_data, "reduce_mean", _bw)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, shift-stabilized."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    def _bw(g: np.ndarray) -> np.ndarray:
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (g - dot) * out_data
    return _unary(x, out_data, "row_softmax", _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with affine scale/shift (population variance)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    _check_finite(out_data, "layer_norm")
    tape = _tape_of(x, gamma, beta)
    out = Tensor(out_data, tape)
    if tape is not None:
        d = x.data.shape[-1]
        def _bw() -> None:
            g = out.grad
            if g is None:
                return
            if gamma.tape is not None:
                gamma.ensure_grad()[...] += _unbroadcast(g * xhat, gamma.data.shape)
            if beta.tape is not None:
                beta.ensure_grad()[...] += _unbroadcast(g, beta.data.shape)
            if x.tape is not None:
                dxhat = g * gamma.data
                term = d * dxhat - dxhat.sum(axis=-1, keepdims=True) \
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
                x.ensure_grad()[...] += inv / d * term
        tape.record(_bw)
    return out


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm; near-zero rows are scaled by 1/eps."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = np.maximum(norm, eps)
    out_data = x.data / clamped
    def _bw(g: np.ndarray) -> np.ndarray:
        live = norm > eps
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (g - np.where(live, out_data * dot, 0.0)) / clamped
    return _unary(x, out_data, "l2_normalize", _bw)
