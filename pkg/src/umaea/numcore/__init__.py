from .engine import (
    NonFiniteValueError,
    Parameter,
    Tape,
    TapeReplayError,
    Tensor,
    TRAIN_DTYPE,
    VERIFY_DTYPE,
    abs_,
    add,
    concat,
    constant,
    diag_part,
    div,
    exp,
    gather_rows,
    l2_normalize,
    layer_norm,
    leaky_relu,
    log,
    matmul,
    minimum,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    row_softmax,
    scale,
    scatter_rows,
    slice_cols,
    sub,
    transpose,
)
from .checkpoint import load_into, load_params, save_params
from .gradcheck import finite_diff_check, numeric_gradient

__all__ = [
    "NonFiniteValueError", "Parameter", "Tape", "TapeReplayError", "Tensor",
    "TRAIN_DTYPE", "VERIFY_DTYPE",
    "abs_", "add", "concat", "constant", "diag_part", "div", "exp",
    "gather_rows", "l2_normalize", "layer_norm", "leaky_relu", "log",
    "matmul", "minimum", "mul", "neg", "reduce_mean", "reduce_sum", "relu",
    "reshape", "row_softmax", "scale", "scatter_rows", "slice_cols", "sub",
    "transpose",
    "load_into", "load_params", "save_params",
    "finite_diff_check", "numeric_gradient",
]
