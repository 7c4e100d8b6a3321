from .tensor import (
    Tape, Tensor, absolute, active_tape, add, as_tensor, attention, check_finite, clip,
    concat, div, exp, gelu, getitem, layernorm, linear, log, matmul, mean, mul, neg,
    power, relu, reshape, segment_max, segment_mean, sigmoid, silu, softmax, softplus,
    sqrt, stack, sub, swapaxes, take_rows, tanh, transpose, tsum, where,
)
from .optim import LrSchedule, ParamStore, adamw_step, clip_grad_norm, cosine_lr
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .gradcheck import gradcheck, numeric_grad, analytic_grad, rel_err
