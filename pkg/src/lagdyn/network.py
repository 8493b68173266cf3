"""The learnable Lagrangian: a fully connected scalar-output network.

Activations are restricted to softplus/tanh/sigmoid because the
acceleration solve differentiates the network twice with respect to its
inputs; a piecewise-linear activation would zero the velocity Hessian
everywhere and leave no dynamics to recover.

Alongside plain evaluation, the module computes the exact value, input
gradient and input Hessian of the network in one layer-by-layer sweep
(second-order forward propagation).  The sweep is written in engine ops, so
when the weights are traced the whole bundle - and anything downstream of
it, such as the pseudoinverse in the acceleration solve - remains
differentiable with respect to the parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.engine import raw_shape, raw_value
from .autodiff.functional import DerivativeBundle
from .dynamics import PhaseState
from .errors import UsageError

__all__ = [
    "ACTIVATIONS",
    "NetworkConfig",
    "ParameterSet",
    "LagrangianNetwork",
    "init",
    "parameter_count",
    "desk_config",
    "paper_config",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT_VERSION",
]

CHECKPOINT_FORMAT_VERSION = 1


class _Activation:
    def __init__(self, fn, d1, d2):
        self.fn = fn
        self.d1 = d1
        self.d2 = d2


def _softplus_d1(s, v):
    return ops.sigmoid(s)


def _softplus_d2(s, v):
    p = ops.sigmoid(s)
    return ops.mul(p, ops.sub(1.0, p))


def _tanh_d1(s, v):
    return ops.sub(1.0, ops.mul(v, v))


def _tanh_d2(s, v):
    return ops.mul(-2.0, ops.mul(v, ops.sub(1.0, ops.mul(v, v))))


def _sigmoid_d1(s, v):
    return ops.mul(v, ops.sub(1.0, v))


def _sigmoid_d2(s, v):
    return ops.mul(ops.mul(v, ops.sub(1.0, v)), ops.sub(1.0, ops.mul(2.0, v)))


ACTIVATIONS = {
    "softplus": _Activation(ops.softplus, _softplus_d1, _softplus_d2),
    "tanh": _Activation(ops.tanh, _tanh_d1, _tanh_d2),
    "sigmoid": _Activation(ops.sigmoid, _sigmoid_d1, _sigmoid_d2),
}


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and seeding of the Lagrangian network.

    ``input_dim`` is 2*d: coordinates concatenated with velocities.
    """

    input_dim: int
    hidden_layers: tuple
    activation: str = "softplus"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1:
            raise UsageError("input_dim must be positive")
        if not self.hidden_layers:
            raise UsageError("hidden_layers must be non-empty")
        if any(h < 1 for h in self.hidden_layers):
            raise UsageError("hidden layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise UsageError(
                f"activation {self.activation!r} is not allowed; the solve "
                f"needs a nonzero second derivative. "
                f"Choose one of {sorted(ACTIVATIONS)}"
            )
        if self.seed < 0 or self.seed > 2**64 - 1:
            raise UsageError("seed must fit in an unsigned 64-bit integer")

    @property
    def layer_dims(self):
        return [self.input_dim, *self.hidden_layers, 1]


def desk_config(input_dim, activation="softplus", seed=0):
    """Small preset every test uses: 2 hidden layers of 64 units."""
    return NetworkConfig(input_dim, (64, 64), activation, seed)


def paper_config(input_dim, activation="softplus", seed=0):
    """Full-scale preset: 4 hidden layers of 500 units."""
    return NetworkConfig(input_dim, (500, 500, 500, 500), activation, seed)


def parameter_count(config):
    """Total parameter count: sum over layers of (n_in + 1) * n_out."""
    dims = config.layer_dims
    return sum((nin + 1) * nout for nin, nout in zip(dims[:-1], dims[1:]))


@dataclass
class ParameterSet:
    """All weights and biases, flat-indexable.

    ``arrays`` alternates [W1, b1, W2, b2, ...]; the flat view is
    layer-major and, within each weight matrix, row-major (rows are output
    units), with the bias following its weight matrix.
    """

    arrays: list = field(default_factory=list)

    @property
    def count(self):
        return sum(a.size for a in self.arrays)

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays])

    def shapes(self):
        return [a.shape for a in self.arrays]

    @classmethod
    def from_flat(cls, flat, shapes):
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(int(np.prod(s)) for s in shapes)
        if flat.size != expected:
            raise UsageError(
                f"flat parameter vector has {flat.size} entries, expected {expected}"
            )
        arrays = []
        offset = 0
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(flat[offset : offset + n].reshape(s).copy())
            offset += n
        return cls(arrays=arrays)

    def copy(self):
        return ParameterSet(arrays=[a.copy() for a in self.arrays])


def init(config):
    """Seed-deterministic initialization.

    Weights are zero-mean normal with per-layer variance 2/(n_in + n_out);
    biases start at zero.
    """
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims
    arrays = []
    for nin, nout in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / (nin + nout))
        arrays.append(rng.normal(0.0, scale, size=(nout, nin)))
        arrays.append(np.zeros(nout))
    return ParameterSet(arrays=arrays)


def _expand(a, axis):
    shape = list(raw_shape(a))
    if axis < 0:
        axis = len(shape) + 1 + axis
    shape.insert(axis, 1)
    return ops.reshape(a, tuple(shape))


def network_value(arrays, config, X, input_transform=None):
    """Plain forward pass for a batch X of shape (batch, input_dim)."""
    act = ACTIVATIONS[config.activation]
    val = X
    if input_transform is not None:
        mean, std = input_transform
        val = ops.div(ops.sub(val, mean), std)
    n_layers = len(arrays) // 2
    for layer in range(n_layers):
        W, b = arrays[2 * layer], arrays[2 * layer + 1]
        val = ops.add(ops.matmul(val, ops.swapaxes(W, -1, -2)), b)
        if layer < n_layers - 1:
            val = act.fn(val)
    return ops.reshape(val, raw_shape(val)[:-1])


def network_bundle(arrays, config, X, input_transform=None):
    """Value, input gradient and input Hessian for a batch X.

    Returns (value (B,), grad (B, m), hess (B, m, m)) with m = input_dim.
    The Hessian of each sample is exactly symmetric by construction.
    """
    act = ACTIVATIONS[config.activation]
    m = config.input_dim
    val = X
    grad = None  # implicit identity
    hess = None  # implicit zero
    if input_transform is not None:
        mean, std = input_transform
        val = ops.div(ops.sub(val, mean), std)
        grad = np.diag(1.0 / np.asarray(std, dtype=np.float64))

    n_layers = len(arrays) // 2
    for layer in range(n_layers - 1):
        W, b = arrays[2 * layer], arrays[2 * layer + 1]
        val = ops.add(ops.matmul(val, ops.swapaxes(W, -1, -2)), b)
        grad = W if grad is None else ops.matmul(W, grad)
        if hess is not None:
            lead = raw_shape(hess)[:-2]
            folded = ops.reshape(hess, tuple(lead) + (m * m,))
            folded = ops.matmul(W, folded)
            hess = ops.reshape(folded, raw_shape(folded)[:-1] + (m, m))
        s = val
        val = act.fn(s)
        d1 = act.d1(s, val)
        d2 = act.d2(s, val)
        gz = grad
        grad = ops.mul(_expand(d1, -1), gz)
        outer = ops.mul(_expand(gz, -1), _expand(gz, -2))
        curvature = ops.mul(_expand(_expand(d2, -1), -1), outer)
        if hess is None:
            hess = curvature
        else:
            hess = ops.add(curvature, ops.mul(_expand(_expand(d1, -1), -1), hess))

    W, b = arrays[-2], arrays[-1]
    out = ops.add(ops.matmul(val, ops.swapaxes(W, -1, -2)), b)
    value = ops.reshape(out, raw_shape(out)[:-1])
    grad_out = ops.matmul(W, grad)
    grad_out = ops.reshape(grad_out, raw_shape(grad_out)[:-2] + (m,))
    lead = raw_shape(hess)[:-2]
    folded = ops.reshape(hess, tuple(lead) + (m * m,))
    hess_out = ops.matmul(W, folded)
    hess_out = ops.reshape(hess_out, raw_shape(hess_out)[:-2] + (m, m))
    return value, grad_out, hess_out


class LagrangianNetwork:
    """A parameterized Lagrangian over concatenated (q, q_dot).

    Evaluation never mutates the parameter set; optimizers swap in new
    arrays between evaluation phases via :meth:`with_arrays`.
    """

    def __init__(self, config, params=None, input_transform=None):
        self.config = config
        self.params = params if params is not None else init(config)
        if input_transform is not None:
            mean = np.asarray(input_transform[0], dtype=np.float64)
            std = np.asarray(input_transform[1], dtype=np.float64)
            if mean.shape != (config.input_dim,) or std.shape != (config.input_dim,):
                raise UsageError("input transform must match input_dim")
            if np.any(std <= 0):
                raise UsageError("input transform std must be positive")
            input_transform = (mean, std)
        self.input_transform = input_transform

    @property
    def dim(self):
        if self.config.input_dim % 2 != 0:
            raise UsageError("state-space use requires an even input_dim")
        return self.config.input_dim // 2

    def _check_state(self, state):
        if 2 * state.dim != self.config.input_dim:
            raise UsageError(
                f"state dimension {state.dim} does not match network input "
                f"dim {self.config.input_dim}"
            )

    def forward(self, state):
        """Scalar Lagrangian value at a phase state."""
        self._check_state(state)
        x = np.concatenate([state.q, state.q_dot])[None, :]
        out = raw_value(network_value(self.params.arrays, self.config, x,
                                      self.input_transform))
        return float(out[0])

    def value_batch(self, Q, QD):
        X = ops.concatenate([Q, QD], axis=-1)
        return network_value(self.params.arrays, self.config, X,
                             self.input_transform)

    def bundle_batch(self, Q, QD):
        X = ops.concatenate([Q, QD], axis=-1)
        return network_bundle(self.params.arrays, self.config, X,
                              self.input_transform)

    def bundle_batch_with(self, arrays, X):
        """Differentiable bundle for explicit (possibly traced) parameters."""
        return network_bundle(arrays, self.config, X, self.input_transform)

    def lagrangian_bundle(self, state):
        """Value, gradient and Hessian over (q, q_dot) at one state."""
        self._check_state(state)
        value, grad, hess = self.bundle_batch(state.q[None, :], state.q_dot[None, :])
        return DerivativeBundle(
            value=float(raw_value(value)[0]),
            gradient=np.asarray(raw_value(grad))[0],
            hessian=np.asarray(raw_value(hess))[0],
        )

    def with_arrays(self, arrays):
        return LagrangianNetwork(
            self.config,
            ParameterSet(arrays=[np.asarray(a, dtype=np.float64) for a in arrays]),
            self.input_transform,
        )


def forward(params, config, state, input_transform=None):
    """Module-level forward: scalar Lagrangian value at ``state``."""
    return LagrangianNetwork(config, params, input_transform).forward(state)


def save_checkpoint(path, network):
    """Write a JSON checkpoint; parameter round-trip is bit-exact."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": {
            "input_dim": network.config.input_dim,
            "hidden_layers": list(network.config.hidden_layers),
            "activation": network.config.activation,
            "seed": network.config.seed,
        },
        "flat_parameters": [float(v) for v in network.params.flatten()],
        "seed": network.config.seed,
    }
    if network.input_transform is not None:
        mean, std = network.input_transform
        payload["input_transform"] = {
            "mean": [float(v) for v in mean],
            "std": [float(v) for v in std],
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise UsageError(f"unsupported checkpoint format_version: {version!r}")
    cfg = payload["config"]
    config = NetworkConfig(
        input_dim=int(cfg["input_dim"]),
        hidden_layers=tuple(cfg["hidden_layers"]),
        activation=cfg["activation"],
        seed=int(cfg["seed"]),
    )
    shapes = []
    dims = config.layer_dims
    for nin, nout in zip(dims[:-1], dims[1:]):
        shapes.append((nout, nin))
        shapes.append((nout,))
    params = ParameterSet.from_flat(
        np.asarray(payload["flat_parameters"], dtype=np.float64), shapes
    )
    transform = None
    if "input_transform" in payload:
        transform = (
            np.asarray(payload["input_transform"]["mean"], dtype=np.float64),
            np.asarray(payload["input_transform"]["std"], dtype=np.float64),
        )
    return LagrangianNetwork(config, params, transform)
