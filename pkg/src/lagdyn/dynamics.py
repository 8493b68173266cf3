"""From a scalar Lagrangian to dynamics.

Given any twice-differentiable scalar Lagrangian L(q, q_dot), the
acceleration solve inverts the velocity-velocity Hessian block against the
forcing term:

    q_ddot = pinv(d2L/dqd dqd^T) [ dL/dq - (d2L/dqd dq^T) q_dot ]

where the mixed matrix has rows indexed by the velocity component and
columns by the coordinate component.  The pseudoinverse truncates singular
values below 1e-10 of the largest, and near-singular Hessians are flagged
rather than raised: training routinely transits degenerate regions.

Also here: the canonical momentum dL/dqd, the Legendre-transform energy
H = p . q_dot - L (constant along true trajectories of autonomous
Lagrangians), and a per-timestep Euler-Lagrange residual diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.engine import make_vjp, raw_value
from .errors import NumericError, UsageError

__all__ = [
    "PhaseState",
    "AccelResult",
    "PINV_RTOL",
    "DEGENERACY_RTOL",
    "CallableLagrangian",
    "as_lagrangian",
    "accel",
    "accelerations",
    "solve_accelerations",
    "hessian_diagnostics",
    "canonical_momentum",
    "learned_energy",
    "energy_series",
    "el_residual",
]

# Singular values below DEGENERACY_RTOL * sigma_max are zeroed by the
# pseudoinverse; the same threshold drives the degenerate flag.
PINV_RTOL = 1e-10
DEGENERACY_RTOL = 1e-10


@dataclass
class PhaseState:
    """Generalized coordinates and velocities at one instant."""

    q: np.ndarray
    q_dot: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        self.q_dot = np.atleast_1d(np.asarray(self.q_dot, dtype=np.float64))
        if self.q.ndim != 1 or self.q.shape != self.q_dot.shape:
            raise UsageError(
                f"q and q_dot must be equal-length vectors, got shapes "
                f"{self.q.shape} and {self.q_dot.shape}"
            )
        if self.q.size < 1:
            raise UsageError("phase state needs at least one coordinate")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.q_dot))):
            raise UsageError("phase state entries must be finite")

    @property
    def dim(self):
        return self.q.size


@dataclass
class AccelResult:
    """Acceleration vector plus conditioning diagnostics for the solve."""

    q_ddot: np.ndarray
    hessian_condition: float
    degenerate: bool


class CallableLagrangian:
    """Adapter for a plain ``fn(q, q_dot) -> scalar`` Lagrangian.

    ``fn`` must be written with :mod:`lagdyn.autodiff.ops` vocabulary and
    accept batched inputs of shape (batch, dim); derivatives are then taken
    by nested reverse-mode passes, vectorized over the batch.
    """

    def __init__(self, fn, dim):
        self.fn = fn
        self.dim = int(dim)

    def value_batch(self, Q, QD):
        return self.fn(Q, QD)

    def gradient_batch(self, Q, QD):
        """Per-sample (dL/dq, dL/dqd), each of shape (batch, dim)."""
        batch = np.shape(raw_value(Q))[0]
        _, vjp = make_vjp(self.fn, (Q, QD))
        return vjp(np.ones(batch))

    def bundle_batch(self, Q, QD):
        """Per-sample value, gradient over (q, qd) and full Hessian."""
        batch = np.shape(raw_value(Q))[0]
        values = raw_value(self.fn(Q, QD))

        def stacked_gradient(q, qd):
            _, vjp = make_vjp(self.fn, (q, qd))
            gq, gqd = vjp(np.ones(batch))
            return ops.concatenate([gq, gqd], axis=-1)

        grad, vjp_grad = make_vjp(stacked_gradient, (Q, QD))
        width = 2 * self.dim
        hess = np.empty((batch, width, width))
        for j in range(width):
            seed = np.zeros((batch, width))
            seed[:, j] = 1.0
            hq, hqd = vjp_grad(seed)
            hess[:, j, :] = np.concatenate(
                [raw_value(hq), raw_value(hqd)], axis=-1
            )
        return values, raw_value(grad), hess


def as_lagrangian(obj, dim=None):
    """Coerce ``obj`` into something exposing value/gradient/bundle batches."""
    if hasattr(obj, "bundle_batch") and hasattr(obj, "dim"):
        return obj
    if callable(obj):
        if dim is None:
            dim = getattr(obj, "dim", None)
        if dim is None:
            raise UsageError("a bare callable Lagrangian needs an explicit dim")
        return CallableLagrangian(obj, dim)
    raise UsageError(f"cannot interpret {type(obj).__name__} as a Lagrangian")


def solve_accelerations(grad, hess, QD):
    """Acceleration solve shared by every Lagrangian flavor.

    ``grad`` has shape (..., 2d) over (q, qd); ``hess`` is the matching
    (..., 2d, 2d) Hessian.  Written in engine ops so the result stays
    differentiable when parameters upstream are being traced.
    """
    d = np.shape(raw_value(QD))[-1]
    g_q = ops.getitem(grad, (Ellipsis, slice(0, d)))
    h_vv = ops.getitem(hess, (Ellipsis, slice(d, None), slice(d, None)))
    # Mixed block rows are velocity components, columns coordinates.
    mixed = ops.getitem(hess, (Ellipsis, slice(d, None), slice(0, d)))
    qd_col = ops.reshape(QD, tuple(np.shape(raw_value(QD))) + (1,))
    rhs = ops.sub(g_q, ops.reshape(ops.matmul(mixed, qd_col),
                                   np.shape(raw_value(g_q))))
    pinv = ops.trunc_pinv(h_vv, PINV_RTOL)
    rhs_col = ops.reshape(rhs, tuple(np.shape(raw_value(rhs))) + (1,))
    acc = ops.reshape(ops.matmul(pinv, rhs_col), np.shape(raw_value(rhs)))
    return acc


def hessian_diagnostics(h_vv):
    """Condition number and degeneracy flag of velocity Hessian block(s)."""
    s = np.linalg.svd(np.asarray(h_vv), compute_uv=False)
    smax = s[..., 0]
    smin = s[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(smin > 0, smax / np.where(smin > 0, smin, 1.0), np.inf)
    cond = np.where(smax > 0, cond, np.inf)
    degenerate = smin < DEGENERACY_RTOL * smax
    degenerate = degenerate | (smax == 0)
    return cond, degenerate


def accelerations(lagrangian, Q, QD):
    """Batched acceleration solve.

    Returns ``(acc, condition, degenerate)`` with shapes (batch, d),
    (batch,), (batch,).
    """
    model = as_lagrangian(lagrangian, np.shape(Q)[-1])
    values, grad, hess = model.bundle_batch(Q, QD)
    grad_raw = np.asarray(raw_value(grad))
    hess_raw = np.asarray(raw_value(hess))
    if not (np.all(np.isfinite(grad_raw)) and np.all(np.isfinite(hess_raw))):
        raise NumericError("non-finite Lagrangian derivatives in acceleration solve")
    d = np.shape(QD)[-1]
    acc = raw_value(solve_accelerations(grad_raw, hess_raw, np.asarray(QD)))
    cond, degenerate = hessian_diagnostics(hess_raw[..., d:, d:])
    return np.asarray(acc), cond, degenerate


def accel(lagrangian, state):
    """Acceleration of a single phase state, with conditioning diagnostics."""
    acc, cond, degenerate = accelerations(
        lagrangian, state.q[None, :], state.q_dot[None, :]
    )
    return AccelResult(
        q_ddot=acc[0],
        hessian_condition=float(cond[0]),
        degenerate=bool(degenerate[0]),
    )


def _state_gradients(lagrangian, Q, QD):
    model = as_lagrangian(lagrangian, np.shape(Q)[-1])
    if hasattr(model, "gradient_batch"):
        gq, gqd = model.gradient_batch(Q, QD)
    else:
        _, grad, _ = model.bundle_batch(Q, QD)
        d = np.shape(Q)[-1]
        gq, gqd = grad[..., :d], grad[..., d:]
    return np.asarray(raw_value(gq)), np.asarray(raw_value(gqd))


def canonical_momentum(lagrangian, state):
    """Conjugate momentum dL/dq_dot at ``state``."""
    _, gqd = _state_gradients(lagrangian, state.q[None, :], state.q_dot[None, :])
    if not np.all(np.isfinite(gqd)):
        raise NumericError("non-finite canonical momentum")
    return gqd[0]


def learned_energy(lagrangian, state):
    """Legendre-transform energy H = p . q_dot - L at ``state``."""
    model = as_lagrangian(lagrangian, state.dim)
    Q, QD = state.q[None, :], state.q_dot[None, :]
    momentum = canonical_momentum(model, state)
    value = float(np.asarray(raw_value(model.value_batch(Q, QD)))[0])
    return float(momentum @ state.q_dot - value)


def energy_series(lagrangian, Q, QD):
    """Legendre-transform energy along a batch of states."""
    model = as_lagrangian(lagrangian, np.shape(Q)[-1])
    _, gqd = _state_gradients(model, Q, QD)
    values = np.asarray(raw_value(model.value_batch(np.asarray(Q), np.asarray(QD))))
    return np.einsum("bi,bi->b", gqd, np.asarray(QD)) - values


def el_residual(lagrangian, traj):
    """Euler-Lagrange residual along a uniformly sampled trajectory.

    For each interior sample the time derivative of the momentum is
    approximated centrally:

        r(t) = [p(t+h) - p(t-h)] / (2h) - dL/dq (t)

    Near-zero residuals certify the trajectory satisfies the learned (or
    analytic) equations of motion; the estimate converges at O(h^2).
    """
    times = np.asarray(traj.times, dtype=np.float64)
    Q = np.asarray(traj.q, dtype=np.float64)
    QD = np.asarray(traj.q_dot, dtype=np.float64)
    if times.size < 3:
        raise UsageError("el_residual needs at least three samples")
    steps = np.diff(times)
    h = steps[0]
    if np.any(np.abs(steps - h) > 1e-12):
        raise UsageError("el_residual requires a uniform timestep")
    gq, gqd = _state_gradients(lagrangian, Q, QD)
    return (gqd[2:] - gqd[:-2]) / (2.0 * h) - gq[1:-1]
