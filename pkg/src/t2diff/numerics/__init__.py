"""Dense tensors with reverse-mode gradients, seeded sampling, grad checking."""
from . import functional, kernels, nn
from .checkpoint import CheckpointFormatError, load_params, save_params
from .gradcheck import grad_check, grad_check_many
from .optim import Adam
from .rng import Rng, gaussian, stream
from .tensor import (
    GraphError,
    NumericalError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    default_dtype,
    div,
    exp,
    gelu,
    getitem,
    log,
    log_softplus,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softplus,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)
from .functional import conv1d, cross_entropy, embedding, layer_norm, softmax, upsample_linear, where

__all__ = [name for name in dir() if not name.startswith("_")]
