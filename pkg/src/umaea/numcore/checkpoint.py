"""Text checkpoint format for named parameter tensors.

Layout: a versioned magic line, then one block per parameter:

    umaea-params v1
    param <name> <dtype> <ndim> <dim0> [dim1 ...]
    <row of decimal floats>          (one line per leading row; scalars/1-D
    ...                               use a single line)
    end

Floats are written with enough digits to round-trip their dtype exactly,
so save/load is bit-identical.
"""

from __future__ import annotations

import os
from typing import Iterable

import numpy as np

from .engine import Parameter

MAGIC = "umaea-params v1"

_FMT = {"float32": "%.9g", "float64": "%.17g"}


def save_params(path: str | os.PathLike, params: Iterable[Parameter]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MAGIC + "\n")
        for p in params:
            v = p.value
            dims = " ".join(str(d) for d in v.shape)
            fh.write(f"param {p.name} {v.dtype.name} {v.ndim}"
                     + (f" {dims}" if dims else "") + "\n")
            fmt = _FMT[v.dtype.name]
            rows = v.reshape(1, -1) if v.ndim < 2 else v.reshape(v.shape[0], -1)
            for row in rows:
                fh.write(" ".join(fmt % x for x in row) + "\n")
        fh.write("end\n")


def load_params(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic line)")
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line == "end":
            return out
        fields = line.split()
        if len(fields) < 4 or fields[0] != "param":
            raise ValueError(f"{path}:{i + 1}: malformed parameter header")
        name, dtype_name, ndim = fields[1], fields[2], int(fields[3])
        shape = tuple(int(d) for d in fields[4:4 + ndim])
        if len(shape) != ndim:
            raise ValueError(f"{path}:{i + 1}: header declares {ndim} dims, "
                             f"lists {len(shape)}")
        dtype = np.dtype(dtype_name)
        n_rows = 1 if ndim < 2 else shape[0]
        values = []
        for r in range(n_rows):
            i += 1
            values.extend(float(x) for x in lines[i].split())
        arr = np.array(values, dtype=dtype)
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise ValueError(f"{path}: parameter {name}: expected {expected} "
                             f"values, got {arr.size}")
        out[name] = arr.reshape(shape)
        i += 1
    raise ValueError(f"{path}: missing end marker")


def load_into(path: str | os.PathLike, params: Iterable[Parameter],
              prefix: str = "") -> None:
    """Load values into existing parameters, matching by (prefixed) name."""
    stored = load_params(path)
    for p in params:
        key = prefix + p.name
        if key not in stored:
            raise KeyError(f"{path}: no stored value for parameter {key}")
        value = stored[key]
        if value.shape != p.value.shape:
            raise ValueError(f"{path}: shape mismatch for {key}: stored "
                             f"{value.shape}, expected {p.value.shape}")
        p.value[...] = value.astype(p.value.dtype)
