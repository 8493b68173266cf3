"""Differentiable primitives: arithmetic, transcendentals, array structure
and the truncated pseudoinverse.

Every function here accepts plain numpy inputs (in which case it is just
numpy) or traced nodes (in which case the operation is recorded).  The
nonlinear scalar vocabulary is deliberately small: add/sub/mul/div, integer
powers, exp, log, sqrt, sin, cos, tanh, sigmoid and softplus.  Structural
operations (reshape, slicing, matmul, reductions, ...) carry no nonlinearity
of their own.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special

from .engine import Node, primitive, raw_shape, _set_accumulator

__all__ = [
    "add", "sub", "mul", "div", "neg", "pow_int",
    "exp", "log", "sqrt", "sin", "cos", "tanh", "sigmoid", "softplus",
    "matmul", "sum_", "mean_", "reshape", "broadcast_to", "swapaxes",
    "getitem", "untake", "concatenate", "roll", "trunc_pinv",
    "stack", "norm2", "dot",
]


def _unbroadcast(g, shape):
    """Reduce cotangent ``g`` back to ``shape`` after numpy broadcasting."""
    g_shape = raw_shape(g)
    while len(g_shape) > len(shape):
        g = sum_(g, axis=0)
        g_shape = g_shape[1:]
    for axis, size in enumerate(shape):
        if size == 1 and g_shape[axis] != 1:
            g = sum_(g, axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

add = primitive(
    lambda a, b: np.add(a, b),
    lambda ans, a, b: (
        lambda g: _unbroadcast(g, raw_shape(a)),
        lambda g: _unbroadcast(g, raw_shape(b)),
    ),
    name="add",
)

sub = primitive(
    lambda a, b: np.subtract(a, b),
    lambda ans, a, b: (
        lambda g: _unbroadcast(g, raw_shape(a)),
        lambda g: _unbroadcast(neg(g), raw_shape(b)),
    ),
    name="sub",
)

mul = primitive(
    lambda a, b: np.multiply(a, b),
    lambda ans, a, b: (
        lambda g: _unbroadcast(mul(g, b), raw_shape(a)),
        lambda g: _unbroadcast(mul(g, a), raw_shape(b)),
    ),
    name="mul",
)

div = primitive(
    lambda a, b: np.divide(a, b),
    lambda ans, a, b: (
        lambda g: _unbroadcast(div(g, b), raw_shape(a)),
        lambda g: _unbroadcast(neg(div(mul(g, ans), b)), raw_shape(b)),
    ),
    name="div",
)

neg = primitive(
    lambda a: np.negative(a),
    lambda ans, a: (lambda g: neg(g),),
    name="neg",
)


def _pow_int_raw(a, n):
    return np.power(a, n)


def _pow_int_vjp(ans, a, n):
    if n == 0:
        return (lambda g: mul(g, 0.0), None)
    return (lambda g: mul(g, mul(float(n), pow_int(a, n - 1))), None)


pow_int = primitive(_pow_int_raw, _pow_int_vjp, name="pow_int")


# -- transcendentals ---------------------------------------------------------

exp = primitive(
    np.exp,
    lambda ans, a: (lambda g: mul(g, ans),),
    name="exp",
)

log = primitive(
    np.log,
    lambda ans, a: (lambda g: div(g, a),),
    name="log",
)

sqrt = primitive(
    np.sqrt,
    lambda ans, a: (lambda g: div(g, mul(2.0, ans)),),
    name="sqrt",
)

sin = primitive(
    np.sin,
    lambda ans, a: (lambda g: mul(g, cos(a)),),
    name="sin",
)

cos = primitive(
    np.cos,
    lambda ans, a: (lambda g: neg(mul(g, sin(a))),),
    name="cos",
)

tanh = primitive(
    np.tanh,
    lambda ans, a: (lambda g: mul(g, sub(1.0, mul(ans, ans))),),
    name="tanh",
)

sigmoid = primitive(
    _special.expit,
    lambda ans, a: (lambda g: mul(g, mul(ans, sub(1.0, ans))),),
    name="sigmoid",
)


def _softplus_raw(a):
    return np.logaddexp(0.0, a)


softplus = primitive(
    _softplus_raw,
    lambda ans, a: (lambda g: mul(g, sigmoid(a)),),
    name="softplus",
)


# -- reductions and structure -------------------------------------------------


def _sum_raw(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(ans, a, axis=None, keepdims=False):
    shape = raw_shape(a)

    def vjp(g):
        if axis is None:
            return broadcast_to(g, shape)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        if not keepdims:
            kept = list(raw_shape(g))
            for ax in sorted(ax % len(shape) for ax in axes):
                kept.insert(ax, 1)
            g = reshape(g, tuple(kept))
        return broadcast_to(g, shape)

    return (vjp, None, None)


sum_ = primitive(_sum_raw, _sum_vjp, name="sum")


def mean_(a, axis=None, keepdims=False):
    shape = raw_shape(a)
    if axis is None:
        count = int(np.prod(shape)) if shape else 1
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


reshape = primitive(
    lambda a, shape: np.reshape(a, shape),
    lambda ans, a, shape: (
        lambda g: reshape(g, raw_shape(a)),
        None,
    ),
    name="reshape",
)

broadcast_to = primitive(
    lambda a, shape: np.broadcast_to(a, shape).copy(),
    lambda ans, a, shape: (
        lambda g: _unbroadcast(g, raw_shape(a)),
        None,
    ),
    name="broadcast_to",
)

swapaxes = primitive(
    lambda a, ax1, ax2: np.swapaxes(a, ax1, ax2),
    lambda ans, a, ax1, ax2: (
        lambda g: swapaxes(g, ax1, ax2),
        None,
        None,
    ),
    name="swapaxes",
)


def _getitem_raw(a, idx):
    out = a[idx]
    return out


getitem = primitive(
    _getitem_raw,
    lambda ans, a, idx: (
        lambda g: untake(g, idx, raw_shape(a)),
        None,
    ),
    name="getitem",
)


def _untake_raw(g, idx, shape):
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, idx, g)
    return out


untake = primitive(
    _untake_raw,
    lambda ans, g, idx, shape: (
        lambda ct: getitem(ct, idx),
        None,
        None,
    ),
    name="untake",
)


def _concat_raw(arrays, axis=0):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(ans, arrays, axis=0):
    sizes = [raw_shape(a)[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for k in range(len(arrays)):
            index = [slice(None)] * len(raw_shape(ans))
            index[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            pieces.append(getitem(g, tuple(index)))
        return tuple(pieces)

    return (vjp, None)


def concatenate(arrays, axis=0):
    """Differentiable concatenate; traced per input array."""
    if not any(isinstance(a, Node) for a in arrays):
        return np.concatenate(arrays, axis=axis)
    # Reduce variadic concat to a fold of pairwise concats so the engine's
    # per-argument bookkeeping stays trivial.
    out = arrays[0]
    for a in arrays[1:]:
        out = _concat_pair(out, a, axis)
    return out


_concat_pair = primitive(
    lambda a, b, axis: np.concatenate([a, b], axis=axis),
    lambda ans, a, b, axis: (
        lambda g: getitem(
            g,
            tuple(
                slice(0, raw_shape(a)[axis]) if d == axis % len(raw_shape(ans))
                else slice(None)
                for d in range(len(raw_shape(ans)))
            ),
        ),
        lambda g: getitem(
            g,
            tuple(
                slice(raw_shape(a)[axis], None) if d == axis % len(raw_shape(ans))
                else slice(None)
                for d in range(len(raw_shape(ans)))
            ),
        ),
        None,
    ),
    name="concat_pair",
)


def stack(arrays, axis=0):
    expanded = []
    for a in arrays:
        shape = list(raw_shape(a))
        shape.insert(axis % (len(shape) + 1), 1)
        expanded.append(reshape(a, tuple(shape)))
    return concatenate(expanded, axis=axis)


roll = primitive(
    lambda a, shift, axis: np.roll(a, shift, axis=axis),
    lambda ans, a, shift, axis: (
        lambda g: roll(g, -shift, axis),
        None,
        None,
    ),
    name="roll",
)


# -- linear algebra -----------------------------------------------------------

matmul = primitive(
    lambda a, b: np.matmul(a, b),
    lambda ans, a, b: (
        lambda g: _unbroadcast(matmul(g, swapaxes(b, -1, -2)), raw_shape(a)),
        lambda g: _unbroadcast(matmul(swapaxes(a, -1, -2), g), raw_shape(b)),
    ),
    name="matmul",
)


def _trunc_pinv_raw(a, rtol):
    """Moore-Penrose pseudoinverse with singular values < rtol*sigma_max zeroed.

    Works on a single matrix or a batch; symmetric inputs yield symmetric
    outputs up to roundoff.
    """
    u, s, vt = np.linalg.svd(a)
    cutoff = rtol * np.max(s, axis=-1, keepdims=True)
    s_inv = np.where(s > cutoff, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return np.matmul(np.swapaxes(vt, -1, -2) * s_inv[..., None, :],
                     np.swapaxes(u, -1, -2))


def _trunc_pinv_vjp(ans, a, rtol):
    # Full-rank rule d(A^-1) = -A^-1 dA A^-1; for rank-deficient inputs this
    # is the declared semi-analytic approximation (truncation is piecewise
    # constant, so the rule is exact wherever the truncation set is stable).
    def vjp(g):
        pt = swapaxes(ans, -1, -2)
        return neg(matmul(pt, matmul(g, pt)))

    return (vjp, None)


trunc_pinv = primitive(_trunc_pinv_raw, _trunc_pinv_vjp, name="trunc_pinv")


# -- conveniences -------------------------------------------------------------


def dot(a, b):
    """Inner product along the last axis."""
    return sum_(mul(a, b), axis=-1)


def norm2(a, axis=-1):
    """Euclidean norm along ``axis``."""
    return sqrt(sum_(mul(a, a), axis=axis))


# -- operator overloading on Node ---------------------------------------------


def _coerce_pow(base, exponent):
    if isinstance(exponent, (int, np.integer)):
        return pow_int(base, int(exponent))
    raise TypeError("only integer powers are supported; use exp/log otherwise")


Node.__add__ = lambda self, other: add(self, other)
Node.__radd__ = lambda self, other: add(other, self)
Node.__sub__ = lambda self, other: sub(self, other)
Node.__rsub__ = lambda self, other: sub(other, self)
Node.__mul__ = lambda self, other: mul(self, other)
Node.__rmul__ = lambda self, other: mul(other, self)
Node.__truediv__ = lambda self, other: div(self, other)
Node.__rtruediv__ = lambda self, other: div(other, self)
Node.__neg__ = lambda self: neg(self)
Node.__pow__ = _coerce_pow
Node.__matmul__ = lambda self, other: matmul(self, other)
Node.__rmatmul__ = lambda self, other: matmul(other, self)
Node.__getitem__ = lambda self, idx: getitem(self, idx)

_set_accumulator(add)
