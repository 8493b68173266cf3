"""Reverse-mode differentiation tape with support for nested derivatives.

The machinery follows the classic trace-stack design: every call to
:func:`make_vjp` pushes a new trace, wraps its arguments in leaf nodes and
records every primitive applied to them.  Primitives dispatch on the
highest-level trace present among their arguments and unwrap exactly one
level per call, so gradients of gradients (and third-order quantities such
as parameter gradients of losses that contain input Hessians) come out of
the same mechanism with no special cases.

Cotangents are propagated by re-applying primitives, which means the
backward pass of an inner trace is itself recorded on any enclosing trace.
All values are float64 numpy arrays (or scalars); evaluation is pure and
deterministic, so repeated runs give bit-identical derivatives.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "primitive",
    "make_vjp",
    "backward",
    "raw_value",
    "raw_shape",
    "zeros_like_raw",
]


class _Trace:
    """One active differentiation context (a tape of nodes)."""

    __slots__ = ("level", "nodes")

    def __init__(self, level):
        self.level = level
        self.nodes = []


_STACK: list[_Trace] = []


def _push_trace():
    trace = _Trace(len(_STACK))
    _STACK.append(trace)
    return trace


def _pop_trace(trace):
    popped = _STACK.pop()
    assert popped is trace, "trace stack corrupted"


class Node:
    """A value recorded on a trace, together with how it was produced.

    ``value`` is the one-level-unwrapped payload: a plain array for the
    innermost trace, or a lower-level Node when traces are nested.
    """

    __slots__ = ("trace", "value", "parents", "vjps", "index")

    def __init__(self, trace, value, parents=(), vjps=()):
        self.trace = trace
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.index = len(trace.nodes)
        trace.nodes.append(self)

    @property
    def shape(self):
        return raw_shape(self)

    @property
    def ndim(self):
        return len(raw_shape(self))

    def __len__(self):
        return raw_shape(self)[0]

    def __repr__(self):
        return f"Node(level={self.trace.level}, value={raw_value(self)!r})"

    # Arithmetic operators are attached by lagdyn.autodiff.ops at import
    # time to avoid a circular module dependency.


def raw_value(x):
    """Strip all Node wrappers, returning the underlying numpy payload."""
    while isinstance(x, Node):
        x = x.value
    return x


def raw_shape(x):
    return np.shape(raw_value(x))


def zeros_like_raw(x):
    return np.zeros(raw_shape(x), dtype=np.float64)


def _as_float_array(x):
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


def primitive(raw_fn, vjp_maker, name=None):
    """Wrap ``raw_fn`` as a trace-aware differentiable operation.

    ``vjp_maker(ans, *args, **kwargs)`` must return one closure per
    positional argument (``None`` for non-differentiable slots).  Each
    closure maps the output cotangent to that argument's cotangent
    contribution and must be written in terms of other primitives so that
    nested differentiation can see through it.
    """

    def wrapped(*args, **kwargs):
        top = None
        for a in args:
            if isinstance(a, Node) and (top is None or a.trace.level > top.level):
                top = a.trace
        if top is None:
            return raw_fn(*args, **kwargs)
        vals = tuple(
            a.value if (isinstance(a, Node) and a.trace is top) else a for a in args
        )
        ans = wrapped(*vals, **kwargs)
        vjps = vjp_maker(ans, *vals, **kwargs)
        parents = []
        parent_vjps = []
        for i, a in enumerate(args):
            if isinstance(a, Node) and a.trace is top:
                if vjps[i] is None:
                    raise TypeError(
                        f"{name or raw_fn.__name__}: argument {i} is not differentiable"
                    )
                parents.append(a)
                parent_vjps.append(vjps[i])
        return Node(top, ans, tuple(parents), tuple(parent_vjps))

    wrapped.__name__ = name or raw_fn.__name__
    wrapped.__qualname__ = wrapped.__name__
    return wrapped


# The add used to accumulate cotangents; installed by ops.py.
_accumulate = None


def _set_accumulator(fn):
    global _accumulate
    _accumulate = fn


def backward(output, seed):
    """Propagate ``seed`` from ``output`` back through its trace.

    Returns a dict mapping node index -> accumulated cotangent, covering
    every node on the path from the leaves to ``output``.
    """
    trace = output.trace
    cotangents = {output.index: seed}
    for node in reversed(trace.nodes[: output.index + 1]):
        g = cotangents.get(node.index)
        if g is None or not node.parents:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if parent.index in cotangents:
                cotangents[parent.index] = _accumulate(
                    cotangents[parent.index], contrib
                )
            else:
                cotangents[parent.index] = contrib
    return cotangents


def make_vjp(fn, args):
    """Evaluate ``fn(*args)`` under a fresh trace.

    Returns ``(value, vjp)`` where ``value`` is the unwrapped result and
    ``vjp(seed)`` maps an output cotangent to a tuple of cotangents, one
    per argument.  ``vjp`` may be called repeatedly with different seeds;
    each call replays the same tape.
    """
    trace = _push_trace()
    try:
        leaves = tuple(
            Node(trace, a if isinstance(a, Node) else _as_float_array(a))
            for a in args
        )
        out = fn(*leaves)
    finally:
        _pop_trace(trace)

    if isinstance(out, Node) and out.trace is trace:
        out_value = out.value

        def vjp(seed):
            cotangents = backward(out, seed)
            return tuple(
                cotangents.get(leaf.index, zeros_like_raw(leaf)) for leaf in leaves
            )

    else:
        # fn ignored its arguments entirely; gradient is identically zero.
        # out may still be a Node on an enclosing trace, so pass it through.
        out_value = out

        def vjp(seed):
            return tuple(zeros_like_raw(leaf) for leaf in leaves)

    return out_value, vjp
