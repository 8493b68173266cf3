"""User-facing derivative operators built on the tape engine.

All operators accept functions written in terms of :mod:`lagdyn.autodiff.ops`
primitives (plain numpy inputs work too, since every primitive falls through
to numpy when nothing is traced).  ``gradient`` and ``hessian`` differentiate
with respect to a function's vector input; ``parameter_gradient``
differentiates a scalar loss with respect to a parameter pytree (flat vector
or list of arrays), including losses whose interior uses input Hessians and
their pseudoinverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericError, UsageError
from .engine import Node, make_vjp, raw_value, zeros_like_raw
from . import ops

__all__ = [
    "DerivativeBundle",
    "evaluate",
    "gradient",
    "value_and_gradient",
    "jacobian",
    "hessian",
    "value_gradient_hessian",
    "parameter_gradient",
]


@dataclass(frozen=True)
class DerivativeBundle:
    """Value, gradient and Hessian of a scalar function at one point."""

    value: float
    gradient: np.ndarray
    hessian: np.ndarray

    def __post_init__(self):
        h = self.hessian
        asym = np.abs(h - h.T)
        tol = 1e-12 * (1.0 + np.abs(h))
        if np.any(asym > tol):
            raise NumericError("Hessian failed its symmetry invariant")


def _check_dim(f, x):
    expected = getattr(f, "input_dim", None)
    x = np.asarray(x, dtype=np.float64)
    if expected is not None and x.shape != (expected,):
        raise UsageError(
            f"dimension mismatch: function expects {expected} inputs, "
            f"got shape {x.shape}"
        )
    return x


def evaluate(f, x):
    """Evaluate a scalar function at ``x`` in double precision."""
    x = _check_dim(f, x)
    out = raw_value(f(x))
    return float(out)


def gradient(f, x):
    """Gradient of scalar ``f`` at ``x``.

    Works both on plain arrays and inside an enclosing trace (the returned
    gradient is then itself differentiable).
    """
    if not isinstance(x, Node):
        x = _check_dim(f, x)
    value, vjp = make_vjp(f, (x,))
    if np.ndim(raw_value(value)) != 0:
        raise UsageError("gradient requires a scalar-valued function")
    (g,) = vjp(1.0)
    if not isinstance(g, Node) and not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient at x={raw_value(x)!r}")
    return g


def value_and_gradient(f, x):
    if not isinstance(x, Node):
        x = _check_dim(f, x)
    value, vjp = make_vjp(f, (x,))
    (g,) = vjp(1.0)
    return value, g


def jacobian(f, x):
    """Jacobian of vector-valued ``f`` at ``x``, rows indexed by outputs."""
    value, vjp = make_vjp(f, (x,))
    out_dim = np.shape(raw_value(value))[0]
    rows = []
    for i in range(out_dim):
        seed = np.zeros(out_dim)
        seed[i] = 1.0
        rows.append(vjp(seed)[0])
    return ops.stack(rows, axis=0)


def hessian(f, x):
    """Hessian of scalar ``f`` at ``x`` (reverse-over-reverse)."""
    if not isinstance(x, Node):
        x = _check_dim(f, x)
    return jacobian(lambda y: gradient(f, y), x)


def value_gradient_hessian(f, x):
    """Bundle of value, gradient and Hessian at ``x``."""
    x = _check_dim(f, x)
    value = evaluate(f, x)
    g = raw_value(gradient(f, x))
    h = raw_value(hessian(f, x))
    return DerivativeBundle(value=value, gradient=np.asarray(g), hessian=np.asarray(h))


def _tree_arrays(params):
    if isinstance(params, np.ndarray):
        return [params], True
    arrays = list(params)
    return arrays, False


def parameter_gradient(loss, params):
    """Gradient of scalar ``loss`` with respect to parameter arrays.

    ``params`` is either one flat array (then ``loss`` receives that array)
    or a sequence of arrays (then ``loss`` receives the sequence).  The loss
    may internally take gradients, Hessians and truncated pseudoinverses
    with respect to its own inputs; those interior derivatives are traced
    and differentiated exactly (the pseudoinverse through its full-rank
    rule).
    """
    arrays, single = _tree_arrays(params)

    def wrapped(*leaf_nodes):
        if single:
            return loss(leaf_nodes[0])
        return loss(list(leaf_nodes))

    value, vjp = make_vjp(wrapped, tuple(arrays))
    if np.ndim(raw_value(value)) != 0:
        raise UsageError("parameter_gradient requires a scalar loss")
    grads = vjp(1.0)
    grads = [np.asarray(raw_value(g), dtype=np.float64) for g in grads]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite parameter gradient")
    return grads[0] if single else grads
