"""Autodiff substrate: tensors, ops, RNG streams, layers, checkpoints."""

from .checkpoint import HEADER, checkpoint_hash, load_checkpoint, save_checkpoint
from .gradcheck import (
    FLOAT32_H,
    FLOAT32_TOL,
    FLOAT64_H,
    FLOAT64_TOL,
    GradCheckReport,
    grad_check,
    run_standard_checks,
    standard_op_checks,
)
from .nn import Embedding, GRUCell, LayerNorm, Linear, Module, ModuleList
from .rng import RngState, fold_key
from .tensor import (
    NEG_INF,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    dropout,
    embedding,
    getitem,
    is_grad_enabled,
    layer_norm,
    matmul,
    mse_loss,
    mul,
    no_grad,
    relu,
    reshape,
    select_steps,
    sigmoid,
    softmax,
    stack,
    take_rows,
    tanh,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "HEADER",
    "checkpoint_hash",
    "load_checkpoint",
    "save_checkpoint",
    "FLOAT32_H",
    "FLOAT32_TOL",
    "FLOAT64_H",
    "FLOAT64_TOL",
    "GradCheckReport",
    "grad_check",
    "run_standard_checks",
    "standard_op_checks",
    "Embedding",
    "GRUCell",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "RngState",
    "fold_key",
    "NEG_INF",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "concat",
    "cross_entropy",
    "dropout",
    "embedding",
    "getitem",
    "is_grad_enabled",
    "layer_norm",
    "matmul",
    "mse_loss",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "select_steps",
    "sigmoid",
    "softmax",
    "stack",
    "take_rows",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
]
