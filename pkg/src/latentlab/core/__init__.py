"""Dense tensors, reverse-mode autodiff and the layers built on them."""
from . import ops
from .gradcheck import grad_check
from .nn import Conv2d, Embedding, Linear, Module, Norm, param
from .rng import RngStream
from .tensor import (
    ComputationRecord,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    count_flops,
    no_grad,
    tensor,
)

__all__ = [
    "ComputationRecord", "Conv2d", "Embedding", "Linear", "Module", "NonFiniteError", "Norm",
    "RngStream", "ShapeError", "Tensor", "backward", "count_flops", "grad_check", "no_grad",
    "ops", "param", "tensor",
]
