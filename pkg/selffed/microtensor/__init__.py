"""
microtensor: minimal reverse-mode automatic differentiation over float64 arrays.
"""

from . import ops
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .ops import PRIMITIVES, eval_primitive
from .optim import AdamW, Optimizer, SGD, build_optimizer, lr_at, sgd_step
from .params import ModelParams, load_params, params_from_bytes, params_to_bytes, save_params
from .tensor import Graph, Node, Tensor, active_graph, backward, no_grad

__all__ = [
    "ops",
    "Tensor",
    "Graph",
    "Node",
    "backward",
    "no_grad",
    "active_graph",
    "PRIMITIVES",
    "eval_primitive",
    "ModelParams",
    "save_params",
    "load_params",
    "params_to_bytes",
    "params_from_bytes",
    "Optimizer",
    "SGD",
    "AdamW",
    "sgd_step",
    "build_optimizer",
    "lr_at",
    "check_gradients",
    "numerical_gradient",
    "relative_error",
]
