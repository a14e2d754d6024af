from . import functional
from .gradcheck import finite_diff_check
from .module import Conv2d, ConvTranspose2d, Linear, Module, Parameter, parameter, xavier_uniform
from .optim import Adam, AdamState, adam_step
from .tensor import NonFiniteError, ShapeError, Tensor, debug_enabled, no_grad, set_debug, tensor

__all__ = [
    "Adam", "AdamState", "Conv2d", "ConvTranspose2d", "Linear", "Module", "NonFiniteError", "Parameter", "ShapeError",
    "Tensor", "adam_step", "debug_enabled", "finite_diff_check", "functional", "no_grad", "parameter",
    "set_debug", "tensor", "xavier_uniform",
]
