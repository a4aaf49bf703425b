from . import autodiff as ad
from .autodiff import GradientTape, Tensor, backward, tensor4
from .layers import avg_pool2, batch_norm, conv2d, dense, gaussian_window, prelu, separable_filter
from .optim import AdamState, adam_step
from .params import Initializer, ParameterSet

__all__ = [
    "ad",
    "AdamState",
    "GradientTape",
    "Initializer",
    "ParameterSet",
    "Tensor",
    "adam_step",
    "avg_pool2",
    "backward",
    "batch_norm",
    "conv2d",
    "dense",
    "gaussian_window",
    "prelu",
    "separable_filter",
    "tensor4",
]
