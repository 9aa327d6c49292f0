"""Minimal dense-tensor engine: taped autodiff, NN primitives, Adam."""

from .adam import AdamState, adam_step, init_adam
from .checkpoint import load_tensors, save_tensors
from .gradcheck import grad_check
from .nnops import (AttentionParams, causal_mask, conv2d, conv2d_transpose,
                    cross_entropy, embedding, gelu, layer_norm, linear,
                    log_softmax, multi_head_attention, relu, softmax)
from .tensor import (Tape, Tensor, backward, leaf, set_finite_checks,
                     stop_gradient)

__all__ = [
    "AdamState", "adam_step", "init_adam",
    "load_tensors", "save_tensors",
    "grad_check",
    "AttentionParams", "causal_mask", "conv2d", "conv2d_transpose",
    "cross_entropy", "embedding", "gelu", "layer_norm", "linear",
    "log_softmax", "multi_head_attention", "relu", "softmax",
    "Tape", "Tensor", "backward", "leaf", "set_finite_checks",
    "stop_gradient",
]
