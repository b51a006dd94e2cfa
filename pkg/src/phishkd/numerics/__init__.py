"""Dense tensor math, reverse-mode differentiation and gradient checking."""
from phishkd.numerics.gradcheck import GradCheckReport, grad_check
from phishkd.numerics.rng import make_rng, derive_seed
from phishkd.numerics.tensor import (
    DEFAULT_DTYPE,
    Parameter,
    Tensor,
    activation,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    finite_checks,
    flip,
    gelu,
    getitem,
    grad_enabled,
    layer_norm,
    log,
    log_softmax,
    make_op,
    masked_mean,
    matmul,
    mul,
    neg,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_with_temperature,
    sub,
    take_rows,
    tanh,
    transpose,
    unbroadcast,
)

__all__ = [name for name in dir() if not name.startswith("_")]
