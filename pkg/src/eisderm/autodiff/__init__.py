from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import BatchNorm1d, Conv2d, DenseBlock, Linear, Module
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    tensor,
    topological_order,
)

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm1d",
    "ContractError",
    "Conv2d",
    "DenseBlock",
    "DimensionError",
    "Linear",
    "Module",
    "NumericError",
    "Tensor",
    "adam_step",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
    "tensor",
    "topological_order",
]
