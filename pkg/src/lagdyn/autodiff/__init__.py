"""Differentiation engine: exact first/second derivatives of scalar
functions with respect to their inputs, and parameter gradients of losses
whose interior computation contains input Hessians and pseudoinverses."""

from .engine import Node, make_vjp, raw_value
from .functional import (
    DerivativeBundle,
    evaluate,
    gradient,
    hessian,
    jacobian,
    parameter_gradient,
    value_and_gradient,
    value_gradient_hessian,
)
from . import ops

__all__ = [
    "Node",
    "make_vjp",
    "raw_value",
    "DerivativeBundle",
    "evaluate",
    "gradient",
    "hessian",
    "jacobian",
    "parameter_gradient",
    "value_and_gradient",
    "value_gradient_hessian",
    "ops",
]
