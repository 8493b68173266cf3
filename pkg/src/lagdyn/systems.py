"""Reference systems: analytic Lagrangians with closed-form accelerations.

Each system doubles as an oracle: its closed-form equations of motion were
derived independently (symbolically) from the same Lagrangian, so the
acceleration solve can be checked against them to tight tolerances.  The
module also provides the classical RK4 integrator, seeded trajectory
generation for training data, rollouts under arbitrary (learned) Lagrangians
and the dataset file format.

All systems use unit masses, lengths and gravity unless overridden.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ops
from .dynamics import PhaseState, accel as _eldyn_accel
from .errors import DataFormatError, GenerationError, RolloutError, UsageError

__all__ = [
    "Trajectory",
    "ReferenceSystem",
    "AnalyticLagrangian",
    "SYSTEM_NAMES",
    "make_system",
    "true_accel",
    "rk4_step",
    "generate_trajectories",
    "rollout",
    "RolloutResult",
    "write_dataset",
    "read_dataset",
    "mix_seed",
]

SYSTEM_NAMES = ("free_particle", "harmonic", "pendulum", "double_pendulum", "wave1d")

_MASK64 = (1 << 64) - 1


def mix_seed(seed, k):
    """Per-trajectory seed: splitmix64 finalizer of (seed XOR k)."""
    z = (int(seed) ^ int(k)) & _MASK64
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass
class Trajectory:
    """Uniformly sampled states plus the accelerations that generated them."""

    times: np.ndarray
    q: np.ndarray
    q_dot: np.ndarray
    true_accel: np.ndarray
    system: str = "custom"
    seed: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.q = np.atleast_2d(np.asarray(self.q, dtype=np.float64))
        self.q_dot = np.atleast_2d(np.asarray(self.q_dot, dtype=np.float64))
        self.true_accel = np.atleast_2d(np.asarray(self.true_accel, dtype=np.float64))
        n = self.times.size
        if not (self.q.shape[0] == self.q_dot.shape[0] == self.true_accel.shape[0] == n):
            raise UsageError("trajectory arrays must share their leading length")
        if n >= 2:
            steps = np.diff(self.times)
            if np.any(np.abs(steps - steps[0]) > 1e-12):
                raise UsageError("trajectory timestep is not uniform")

    @property
    def dim(self):
        return self.q.shape[1]

    @property
    def timestep(self):
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def state(self, k):
        return PhaseState(self.q[k], self.q_dot[k])

    def samples(self):
        """Iterate (PhaseState, acceleration) training pairs."""
        for k in range(self.times.size):
            yield self.state(k), self.true_accel[k]


class AnalyticLagrangian:
    """A Lagrangian with hand-derived value/gradient/Hessian closed forms.

    ``fn`` stays engine-expressible so the same object can be pushed through
    the differentiation engine; the closed forms are the fast path and are
    tested for exact agreement with the traced derivatives.
    """

    def __init__(self, fn, bundle_fn, dim):
        self.fn = fn
        self._bundle_fn = bundle_fn
        self.dim = int(dim)

    def value_batch(self, Q, QD):
        return self.fn(Q, QD)

    def bundle_batch(self, Q, QD):
        return self._bundle_fn(np.asarray(Q, dtype=np.float64),
                               np.asarray(QD, dtype=np.float64))

    def gradient_batch(self, Q, QD):
        _, grad, _ = self.bundle_batch(Q, QD)
        d = self.dim
        return grad[..., :d], grad[..., d:]


@dataclass(frozen=True)
class ReferenceSystem:
    name: str
    dim: int
    lagrangian: AnalyticLagrangian
    accel_fn: object
    sampler: object
    sampler_ranges: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    def true_accel_batch(self, Q, QD):
        return self.accel_fn(np.asarray(Q, dtype=np.float64),
                             np.asarray(QD, dtype=np.float64))

    def sample_initial(self, rng):
        q, qd = self.sampler(rng)
        return PhaseState(q, qd)


def true_accel(system, state):
    """Closed-form acceleration of a reference system at one state."""
    if state.dim != system.dim:
        raise UsageError(
            f"state dimension {state.dim} does not match system "
            f"{system.name} (d={system.dim})"
        )
    return system.true_accel_batch(state.q[None, :], state.q_dot[None, :])[0]


# -- system definitions -------------------------------------------------------


def _free_particle(m=1.0):
    def fn(Q, QD):
        return ops.sum_(ops.mul(0.5 * m, ops.mul(QD, QD)), axis=-1)

    def bundle(Q, QD):
        b, d = Q.shape
        value = 0.5 * m * np.sum(QD * QD, axis=-1)
        grad = np.concatenate([np.zeros_like(Q), m * QD], axis=-1)
        hess = np.zeros((b, 2 * d, 2 * d))
        hess[:, d:, d:] = m * np.eye(d)
        return value, grad, hess

    def acc(Q, QD):
        return np.zeros_like(Q)

    ranges = {"q": (-1.0, 1.0), "q_dot": (-1.0, 1.0)}

    def sampler(rng):
        return rng.uniform(-1.0, 1.0, 2), rng.uniform(-1.0, 1.0, 2)

    return ReferenceSystem(
        "free_particle", 2, AnalyticLagrangian(fn, bundle, 2), acc, sampler,
        ranges, {"m": m},
    )


def _harmonic(m=1.0, k=1.0):
    def fn(Q, QD):
        kinetic = ops.sum_(ops.mul(0.5 * m, ops.mul(QD, QD)), axis=-1)
        potential = ops.sum_(ops.mul(0.5 * k, ops.mul(Q, Q)), axis=-1)
        return ops.sub(kinetic, potential)

    def bundle(Q, QD):
        b = Q.shape[0]
        value = 0.5 * m * np.sum(QD * QD, -1) - 0.5 * k * np.sum(Q * Q, -1)
        grad = np.concatenate([-k * Q, m * QD], axis=-1)
        hess = np.zeros((b, 2, 2))
        hess[:, 0, 0] = -k
        hess[:, 1, 1] = m
        return value, grad, hess

    def acc(Q, QD):
        return -(k / m) * Q

    ranges = {"q": (-1.0, 1.0), "q_dot": (-1.0, 1.0)}

    def sampler(rng):
        return rng.uniform(-1.0, 1.0, 1), rng.uniform(-1.0, 1.0, 1)

    return ReferenceSystem(
        "harmonic", 1, AnalyticLagrangian(fn, bundle, 1), acc, sampler,
        ranges, {"m": m, "k": k},
    )


def _pendulum(m=1.0, length=1.0, g=1.0):
    ml2 = m * length * length
    mgl = m * g * length

    def fn(Q, QD):
        kinetic = ops.mul(0.5 * ml2, ops.mul(QD[..., 0], QD[..., 0]))
        return ops.add(kinetic, ops.mul(mgl, ops.cos(Q[..., 0])))

    def bundle(Q, QD):
        b = Q.shape[0]
        theta = Q[:, 0]
        omega = QD[:, 0]
        value = 0.5 * ml2 * omega * omega + mgl * np.cos(theta)
        grad = np.stack([-mgl * np.sin(theta), ml2 * omega], axis=-1)
        hess = np.zeros((b, 2, 2))
        hess[:, 0, 0] = -mgl * np.cos(theta)
        hess[:, 1, 1] = ml2
        return value, grad, hess

    def acc(Q, QD):
        return -(g / length) * np.sin(Q)

    ranges = {"q": (-np.pi, np.pi), "q_dot": (-1.0, 1.0)}

    def sampler(rng):
        return rng.uniform(-np.pi, np.pi, 1), rng.uniform(-1.0, 1.0, 1)

    return ReferenceSystem(
        "pendulum", 1, AnalyticLagrangian(fn, bundle, 1), acc, sampler,
        ranges, {"m": m, "l": length, "g": g},
    )


def _double_pendulum(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=1.0):
    # Angles measured from the downward vertical.
    def fn(Q, QD):
        t1, t2 = Q[..., 0], Q[..., 1]
        w1, w2 = QD[..., 0], QD[..., 1]
        kinetic = ops.add(
            ops.add(
                ops.mul(0.5 * (m1 + m2) * l1 * l1, ops.mul(w1, w1)),
                ops.mul(0.5 * m2 * l2 * l2, ops.mul(w2, w2)),
            ),
            ops.mul(m2 * l1 * l2, ops.mul(ops.mul(w1, w2), ops.cos(ops.sub(t1, t2)))),
        )
        potential = ops.add(
            ops.mul((m1 + m2) * g * l1, ops.cos(t1)),
            ops.mul(m2 * g * l2, ops.cos(t2)),
        )
        return ops.add(kinetic, potential)

    def bundle(Q, QD):
        b = Q.shape[0]
        t1, t2 = Q[:, 0], Q[:, 1]
        w1, w2 = QD[:, 0], QD[:, 1]
        c, s = np.cos(t1 - t2), np.sin(t1 - t2)
        a11 = (m1 + m2) * l1 * l1
        a22 = m2 * l2 * l2
        a12 = m2 * l1 * l2
        value = (0.5 * a11 * w1 * w1 + 0.5 * a22 * w2 * w2 + a12 * w1 * w2 * c
                 + (m1 + m2) * g * l1 * np.cos(t1) + m2 * g * l2 * np.cos(t2))
        grad = np.empty((b, 4))
        grad[:, 0] = -a12 * w1 * w2 * s - (m1 + m2) * g * l1 * np.sin(t1)
        grad[:, 1] = a12 * w1 * w2 * s - m2 * g * l2 * np.sin(t2)
        grad[:, 2] = a11 * w1 + a12 * w2 * c
        grad[:, 3] = a22 * w2 + a12 * w1 * c
        hess = np.zeros((b, 4, 4))
        hess[:, 0, 0] = -a12 * w1 * w2 * c - (m1 + m2) * g * l1 * np.cos(t1)
        hess[:, 0, 1] = a12 * w1 * w2 * c
        hess[:, 1, 0] = hess[:, 0, 1]
        hess[:, 1, 1] = -a12 * w1 * w2 * c - m2 * g * l2 * np.cos(t2)
        hess[:, 2, 0] = -a12 * w2 * s
        hess[:, 2, 1] = a12 * w2 * s
        hess[:, 3, 0] = -a12 * w1 * s
        hess[:, 3, 1] = a12 * w1 * s
        hess[:, 0, 2] = hess[:, 2, 0]
        hess[:, 1, 2] = hess[:, 2, 1]
        hess[:, 0, 3] = hess[:, 3, 0]
        hess[:, 1, 3] = hess[:, 3, 1]
        hess[:, 2, 2] = a11
        hess[:, 2, 3] = a12 * c
        hess[:, 3, 2] = a12 * c
        hess[:, 3, 3] = a22
        return value, grad, hess

    def acc(Q, QD):
        t1, t2 = Q[..., 0], Q[..., 1]
        w1, w2 = QD[..., 0], QD[..., 1]
        delta = t1 - t2
        c, s = np.cos(delta), np.sin(delta)
        denom = m1 + m2 - m2 * c * c
        a1 = (
            -g * m1 * np.sin(t1)
            - 0.5 * g * m2 * np.sin(t1 - 2.0 * t2)
            - 0.5 * g * m2 * np.sin(t1)
            - 0.5 * l1 * m2 * np.sin(2.0 * delta) * w1 * w1
            - l2 * m2 * s * w2 * w2
        ) / (l1 * denom)
        a2 = (
            g * (m1 + m2) * (np.sin(2.0 * t1 - t2) - np.sin(t2))
            + 2.0 * l1 * (m1 + m2) * s * w1 * w1
            + l2 * m2 * np.sin(2.0 * delta) * w2 * w2
        ) / (2.0 * l2 * denom)
        return np.stack([a1, a2], axis=-1)

    ranges = {"q": (-np.pi / 2, np.pi / 2), "q_dot": (-0.5, 0.5)}

    def sampler(rng):
        return rng.uniform(-np.pi / 2, np.pi / 2, 2), rng.uniform(-0.5, 0.5, 2)

    return ReferenceSystem(
        "double_pendulum", 2, AnalyticLagrangian(fn, bundle, 2), acc, sampler,
        ranges, {"m1": m1, "m2": m2, "l1": l1, "l2": l2, "g": g},
    )


def _wave1d(n=16, dx=1.0):
    if n < 5:
        raise UsageError("wave1d needs at least 5 grid sites")
    inv2dx = 1.0 / (2.0 * dx)

    def fn(Q, QD):
        # Per-site density summed over the lattice: phi_dot^2 minus the
        # squared centered spatial difference (no conventional 1/2 factors).
        diff = ops.mul(inv2dx, ops.sub(ops.roll(Q, -1, -1), ops.roll(Q, 1, -1)))
        return ops.sub(
            ops.sum_(ops.mul(QD, QD), axis=-1),
            ops.sum_(ops.mul(diff, diff), axis=-1),
        )

    def bundle(Q, QD):
        b = Q.shape[0]
        diff = (np.roll(Q, -1, -1) - np.roll(Q, 1, -1)) * inv2dx
        value = np.sum(QD * QD, -1) - np.sum(diff * diff, -1)
        grad_q = (np.roll(Q, -2, -1) - 2.0 * Q + np.roll(Q, 2, -1)) / (2.0 * dx * dx)
        grad = np.concatenate([grad_q, 2.0 * QD], axis=-1)
        hq = np.zeros((n, n))
        idx = np.arange(n)
        hq[idx, idx] = -2.0 / (2.0 * dx * dx)
        hq[idx, (idx + 2) % n] += 1.0 / (2.0 * dx * dx)
        hq[idx, (idx - 2) % n] += 1.0 / (2.0 * dx * dx)
        hess = np.zeros((b, 2 * n, 2 * n))
        hess[:, :n, :n] = hq
        hess[:, n:, n:] = 2.0 * np.eye(n)
        return value, grad, hess

    def acc(Q, QD):
        return (np.roll(Q, -2, -1) - 2.0 * Q + np.roll(Q, 2, -1)) / (4.0 * dx * dx)

    ranges = {"q": (-0.5, 0.5), "q_dot": (-0.5, 0.5)}

    def sampler(rng):
        return rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n)

    return ReferenceSystem(
        "wave1d", n, AnalyticLagrangian(fn, bundle, n), acc, sampler,
        ranges, {"n": n, "dx": dx},
    )


_FACTORIES = {
    "free_particle": _free_particle,
    "harmonic": _harmonic,
    "pendulum": _pendulum,
    "double_pendulum": _double_pendulum,
    "wave1d": _wave1d,
}


def make_system(name, **overrides):
    """Build a reference system by name; constants default to 1."""
    if name not in _FACTORIES:
        raise UsageError(
            f"unknown system {name!r}; valid names: {', '.join(SYSTEM_NAMES)}"
        )
    return _FACTORIES[name](**overrides)


# -- integration ---------------------------------------------------------------


def rk4_step(accel_fn, state, h):
    """One classical RK4 step of (q, q_dot)' = (q_dot, accel_fn(state))."""
    q, qd = state.q, state.q_dot
    k1q, k1v = qd, accel_fn(state)
    s2 = PhaseState(q + 0.5 * h * k1q, qd + 0.5 * h * k1v)
    k2q, k2v = s2.q_dot, accel_fn(s2)
    s3 = PhaseState(q + 0.5 * h * k2q, qd + 0.5 * h * k2v)
    k3q, k3v = s3.q_dot, accel_fn(s3)
    s4 = PhaseState(q + h * k3q, qd + h * k3v)
    k4q, k4v = s4.q_dot, accel_fn(s4)
    return PhaseState(
        q + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q),
        qd + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    )


def _integrate(accel_fn, initial, h, steps):
    d = initial.dim
    Q = np.empty((steps + 1, d))
    QD = np.empty((steps + 1, d))
    A = np.empty((steps + 1, d))
    state = initial
    for k in range(steps + 1):
        Q[k], QD[k] = state.q, state.q_dot
        A[k] = accel_fn(state)
        if k < steps:
            state = rk4_step(accel_fn, state, h)
    return Q, QD, A


def generate_trajectories(system, count, h, steps, seed):
    """Seed-deterministic RK4 trajectories driven by the closed-form oracle.

    Trajectory k draws its initial state from default_rng(mix_seed(seed, k)),
    so datasets are reproducible regardless of generation order.
    """
    if count < 0:
        raise UsageError("count must be non-negative")
    if steps < 2:
        raise UsageError("steps must be at least 2")
    if h <= 0:
        raise UsageError("timestep h must be positive")

    def accel_fn(state):
        return system.true_accel_batch(state.q[None, :], state.q_dot[None, :])[0]

    trajectories = []
    times = np.arange(steps + 1) * h
    for k in range(count):
        rng = np.random.default_rng(mix_seed(seed, k))
        initial = system.sample_initial(rng)
        try:
            Q, QD, A = _integrate(accel_fn, initial, h, steps)
        except (UsageError, FloatingPointError) as exc:
            raise GenerationError(f"integration blew up ({exc})", k) from exc
        trajectories.append(
            Trajectory(times.copy(), Q, QD, A, system=system.name, seed=seed)
        )
    return trajectories


@dataclass
class RolloutResult:
    trajectory: Trajectory
    degenerate_events: int
    max_condition: float


def rollout(lagrangian, initial, h, steps, system="rollout"):
    """Integrate the dynamics induced by any (possibly learned) Lagrangian.

    Accelerations come from the Euler-Lagrange solve; degenerate-Hessian
    events along the way are counted into the result rather than raised.
    """
    if steps < 0:
        raise UsageError("steps must be non-negative")
    if steps > 0 and h <= 0:
        raise UsageError("timestep h must be positive")
    events = 0
    max_condition = 1.0

    def accel_fn(state):
        nonlocal events, max_condition
        result = _eldyn_accel(lagrangian, state)
        if result.degenerate:
            events += 1
        elif np.isfinite(result.hessian_condition):
            max_condition = max(max_condition, result.hessian_condition)
        return result.q_ddot

    last_ok = 0
    d = initial.dim
    Q = np.empty((steps + 1, d))
    QD = np.empty((steps + 1, d))
    A = np.empty((steps + 1, d))
    state = initial
    try:
        for k in range(steps + 1):
            Q[k], QD[k] = state.q, state.q_dot
            A[k] = accel_fn(state)
            last_ok = k
            if k < steps:
                state = rk4_step(accel_fn, state, h)
    except (UsageError, FloatingPointError) as exc:
        raise RolloutError(f"rollout left the finite domain ({exc})", last_ok) from exc
    times = np.arange(steps + 1) * h
    traj = Trajectory(times, Q, QD, A, system=system, seed=0)
    return RolloutResult(traj, events, max_condition)


# -- dataset files --------------------------------------------------------------


def _meta_path(csv_path):
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".meta.json")


def write_dataset(csv_path, trajectories, meta):
    """Write trajectories as CSV plus a JSON metadata sidecar.

    Columns: traj,t,q0..q{d-1},qd0..qd{d-1},a0..a{d-1} at 17 significant
    digits, which round-trips doubles exactly.
    """
    csv_path = Path(csv_path)
    if not trajectories:
        d = int(meta.get("d", 1))
    else:
        d = trajectories[0].dim
    header = (
        ["traj", "t"]
        + [f"q{i}" for i in range(d)]
        + [f"qd{i}" for i in range(d)]
        + [f"a{i}" for i in range(d)]
    )
    lines = [",".join(header)]
    for idx, traj in enumerate(trajectories):
        for k in range(traj.times.size):
            row = [str(idx), format(traj.times[k], ".17g")]
            row += [format(v, ".17g") for v in traj.q[k]]
            row += [format(v, ".17g") for v in traj.q_dot[k]]
            row += [format(v, ".17g") for v in traj.true_accel[k]]
            lines.append(",".join(row))
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _meta_path(csv_path).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_dataset(csv_path):
    """Parse a dataset CSV (and sidecar); malformed rows name their line."""
    csv_path = Path(csv_path)
    text = csv_path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataFormatError("empty dataset file", 1)
    header = lines[0].split(",")
    if header[:2] != ["traj", "t"] or (len(header) - 2) % 3 != 0:
        raise DataFormatError(f"unrecognized header {lines[0]!r}", 1)
    d = (len(header) - 2) // 3
    expected = ["traj", "t"]
    expected += [f"q{i}" for i in range(d)]
    expected += [f"qd{i}" for i in range(d)]
    expected += [f"a{i}" for i in range(d)]
    if header != expected:
        raise DataFormatError(f"unrecognized header {lines[0]!r}", 1)

    groups = {}
    order = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataFormatError(
                f"expected {len(header)} fields, found {len(parts)}", lineno
            )
        try:
            traj_id = int(parts[0])
            values = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DataFormatError(str(exc), lineno) from exc
        if not np.all(np.isfinite(values)):
            raise DataFormatError("non-finite value", lineno)
        if traj_id not in groups:
            groups[traj_id] = []
            order.append(traj_id)
        groups[traj_id].append(values)

    meta = {}
    meta_file = _meta_path(csv_path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text(encoding="utf-8"))

    trajectories = []
    for traj_id in order:
        rows = np.asarray(groups[traj_id])
        times = rows[:, 0]
        q = rows[:, 1 : 1 + d]
        qd = rows[:, 1 + d : 1 + 2 * d]
        acc = rows[:, 1 + 2 * d : 1 + 3 * d]
        trajectories.append(
            Trajectory(
                times, q, qd, acc,
                system=str(meta.get("system", "unknown")),
                seed=int(meta.get("seed", 0)),
            )
        )
    return trajectories, meta
