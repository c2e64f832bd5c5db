"""Small numpy autodiff engine with the operators the crowd forecaster needs."""

from .conv import (
    ConvLSTMParams,
    ConvLSTMState,
    conv2d,
    conv2d_backward_input,
    conv_transpose2d,
    convlstm_step,
)
from .optim import CheckpointError, adam_step, checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint
from .tensor import (
    Param,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    default_dtype,
    getitem,
    huber,
    leaky_relu,
    mul,
    precision,
    reshape,
    sigmoid,
    softplus,
    stack,
    sub,
    tanh,
    tsum,
)

__all__ = [
    "CheckpointError",
    "ConvLSTMParams",
    "ConvLSTMState",
    "Param",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "checkpoint_bytes",
    "concat",
    "conv2d",
    "conv2d_backward_input",
    "conv_transpose2d",
    "convlstm_step",
    "default_dtype",
    "getitem",
    "huber",
    "leaky_relu",
    "load_checkpoint",
    "mul",
    "precision",
    "read_checkpoint",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "softplus",
    "stack",
    "sub",
    "tanh",
    "tsum",
]
