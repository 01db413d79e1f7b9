from .tensor import (
    DEFAULT_DTYPE,
    ComputationRecord,
    Function,
    GraphError,
    ShapeError,
    Tensor,
    as_tensor,
    is_grad_enabled,
    no_grad,
    zero_grads,
)
from .gradcheck import NonDeterministicError, grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from . import ops
from .nn import Embedding, LayerNorm, Linear, Module, Parameter, RMSNorm

__all__ = [
    "DEFAULT_DTYPE", "ComputationRecord", "Function", "GraphError", "ShapeError", "Tensor",
    "as_tensor", "is_grad_enabled", "no_grad", "zero_grads", "NonDeterministicError",
    "grad_check", "CheckpointError", "load_checkpoint", "save_checkpoint", "ops",
    "Embedding", "LayerNorm", "Linear", "Module", "Parameter", "RMSNorm",
]
