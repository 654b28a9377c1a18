"""Minimal dense-tensor core with reverse-mode differentiation."""
from .gradcheck import directional_check, finite_diff_check, numeric_gradient, relative_error
from .init import glorot_uniform
from .ops import (
    ACTIVATIONS,
    add,
    affine,
    clip,
    concat,
    conv2d,
    conv_output_size,
    div,
    einsum,
    exp,
    expand,
    index,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    roi_align,
    scale,
    silu,
    smooth_l1,
    softmax,
    softmax_cross_entropy,
    softplus,
    stack,
    sub,
    sum,
    tanh,
    transpose,
)
from .serialize import load_tensor, read_tensor, save_tensor, write_tensor
from .tensor import ComputationRecord, Function, Tensor, as_tensor, backward, no_grad, trace

__all__ = [name for name in dir() if not name.startswith("_")]
