"""NumPy tensor substrate: autodiff, layers, optimizers, checkpoints."""
from .functional import (conv2d, conv2d_nhwc, cross_entropy, group_norm, group_norm_nhwc, linear,
                         mse_loss, upsample_nearest, upsample_nearest_nhwc)
from .layers import Conv2d, GroupNorm, Linear, Module, Parameter, SiLU
from .optim import (Adam, AdamW, adam_step, adamw_step, clip_grad_norm, lr_linear_decay,
                    lr_warmup_then_constant)
from .serialize import MAGIC, load_tensors, read_header, save_tensors
from .tensor import (Tensor, abs_, add, as_tensor, concat, div, exp, is_grad_enabled, log,
                     log_softmax, matmul, maximum, mean, mul, no_grad, power, relu, reshape,
                     sigmoid, silu, softmax, sqrt, sub, sum_, transpose)

ce_loss = cross_entropy

__all__ = [
    "Adam", "AdamW", "Conv2d", "GroupNorm", "Linear", "MAGIC", "Module", "Parameter", "SiLU",
    "Tensor", "abs_", "adam_step", "adamw_step", "add", "as_tensor", "ce_loss", "clip_grad_norm",
    "concat", "conv2d", "conv2d_nhwc", "cross_entropy", "div", "exp", "group_norm", "group_norm_nhwc", "is_grad_enabled", "linear",
    "load_tensors", "log", "log_softmax", "lr_linear_decay", "lr_warmup_then_constant", "matmul",
    "maximum", "mean", "mse_loss", "mul", "no_grad", "power", "read_header", "relu", "reshape",
    "save_tensors", "sigmoid", "silu", "softmax", "sqrt", "sub", "sum_", "transpose",
    "upsample_nearest", "upsample_nearest_nhwc",
]
