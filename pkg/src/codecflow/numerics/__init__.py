"""Minimal dense-tensor autodiff, layers and optimizer."""

from codecflow.numerics import tensor as ops
from codecflow.numerics.nn import Conv1d, ConvTranspose1d, Embedding, LayerNorm, Linear, Module, parameter, same_padding
from codecflow.numerics.optim import AdamW, OptimizerState, clip_grad_norm
from codecflow.numerics.tensor import Tensor, as_tensor, backward, default_dtype, double_precision, no_grad

__all__ = [
    "AdamW",
    "Conv1d",
    "ConvTranspose1d",
    "Embedding",
    "LayerNorm",
    "Linear",
    "Module",
    "OptimizerState",
    "Tensor",
    "as_tensor",
    "backward",
    "clip_grad_norm",
    "default_dtype",
    "double_precision",
    "no_grad",
    "ops",
    "parameter",
    "same_padding",
]
