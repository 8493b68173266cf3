"""Minibatch training of Lagrangian models against true accelerations.

The per-sample loss is the Euclidean norm of the difference between the
model's Euler-Lagrange acceleration and the recorded true acceleration; a
batch reduces by the arithmetic mean in a fixed order.  Optimization is
Adam (beta1=0.9, beta2=0.999, eps=1e-8) with a learning rate that decays
multiplicatively each epoch.  Everything is seed-deterministic: two runs
with the same configuration produce bit-identical loss curves.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.engine import make_vjp, raw_value
from .dynamics import hessian_diagnostics, solve_accelerations
from .errors import TrainingDiverged, UsageError
from .network import LagrangianNetwork, save_checkpoint

__all__ = [
    "TrainConfig",
    "TrainReport",
    "NetworkDynamicsModel",
    "AdamOptimizer",
    "sample_loss",
    "batch_loss",
    "evaluate",
    "train",
    "flatten_dataset",
    "save_report",
    "REPORT_FORMAT_VERSION",
]

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    seed: int
    batch_size: int = 32
    lr_initial: float = 1e-3
    lr_decay: float = 0.99
    split: float = 0.9
    loss_reduction: str = "per_sample_norm_mean"
    standardize: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError("epochs must be non-negative")
        if self.batch_size < 1:
            raise UsageError("batch_size must be at least 1")
        if not self.lr_initial > 0:
            raise UsageError("lr_initial must be positive")
        if not 0 < self.split < 1:
            raise UsageError("split must lie strictly between 0 and 1")
        if self.loss_reduction != "per_sample_norm_mean":
            raise UsageError(
                f"unsupported loss_reduction {self.loss_reduction!r}"
            )

    def as_dict(self):
        return {
            "epochs": self.epochs,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "lr_initial": self.lr_initial,
            "lr_decay": self.lr_decay,
            "split": self.split,
            "loss_reduction": self.loss_reduction,
            "standardize": self.standardize,
        }


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    config: TrainConfig
    seed: int
    degenerate_events: int
    wall_seconds: float
    initial_val_loss: float = float("nan")
    final_arrays: list = field(default_factory=list)


class NetworkDynamicsModel:
    """Adapter exposing a LagrangianNetwork as a trainable dynamics model."""

    def __init__(self, network):
        self.network = network
        self.dim = network.dim

    @property
    def parameter_arrays(self):
        return self.network.params.arrays

    def batch_accelerations(self, arrays, Q, QD):
        X = ops.concatenate([Q, QD], axis=-1)
        _, grad, hess = self.network.bundle_batch_with(arrays, X)
        acc = solve_accelerations(grad, hess, QD)
        d = self.dim
        h_vv = np.asarray(raw_value(hess))[..., d:, d:]
        return acc, h_vv

    def with_arrays(self, arrays):
        return NetworkDynamicsModel(self.network.with_arrays(arrays))


def _model_for(model):
    if isinstance(model, LagrangianNetwork):
        return NetworkDynamicsModel(model)
    if hasattr(model, "batch_accelerations") and hasattr(model, "parameter_arrays"):
        return model
    raise UsageError(f"cannot train a {type(model).__name__}")


def _loss_node(model, arrays, Q, QD, A_true):
    acc, h_vv = model.batch_accelerations(arrays, Q, QD)
    diff = ops.sub(acc, A_true)
    return ops.mean_(ops.norm2(diff, axis=-1)), h_vv


def sample_loss(params, model, sample):
    """Euclidean-norm acceleration error on one (state, acceleration) pair."""
    state, target = sample
    model = _model_for(model)
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if target.shape != (model.dim,):
        raise UsageError(
            f"target acceleration has shape {target.shape}, expected ({model.dim},)"
        )
    value, _ = _loss_node(
        model, list(params), state.q[None, :], state.q_dot[None, :],
        target[None, :],
    )
    return float(raw_value(value))


def batch_loss(params, model, batch):
    """Mean of sample losses, reduced in batch-index order."""
    if len(batch) == 0:
        raise UsageError("batch_loss needs a non-empty batch")
    model = _model_for(model)
    Q = np.stack([s.q for s, _ in batch])
    QD = np.stack([s.q_dot for s, _ in batch])
    A = np.stack([np.atleast_1d(np.asarray(a, dtype=np.float64)) for _, a in batch])
    value, _ = _loss_node(model, list(params), Q, QD, A)
    return float(raw_value(value))


def flatten_dataset(trajectories):
    """Stack every (state, acceleration) sample of a trajectory list."""
    if not trajectories:
        raise UsageError("dataset is empty")
    Q = np.concatenate([t.q for t in trajectories])
    QD = np.concatenate([t.q_dot for t in trajectories])
    A = np.concatenate([t.true_accel for t in trajectories])
    return Q, QD, A


def evaluate(params, model, dataset):
    """Mean sample loss over a full dataset (list of trajectories or arrays)."""
    model = _model_for(model)
    if isinstance(dataset, tuple):
        Q, QD, A = dataset
    else:
        Q, QD, A = flatten_dataset(dataset)
    value, _ = _loss_node(model, list(params), Q, QD, A)
    return float(raw_value(value))


class AdamOptimizer:
    """Standard Adam; state and updates follow a fixed array order."""

    def __init__(self, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads, lr):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            out.append(a - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def _standardized_network(network, Q, QD):
    X = np.concatenate([Q, QD], axis=-1)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return LagrangianNetwork(network.config, network.params.copy(), (mean, std))


def train(model, dataset, config, out_dir=None):
    """Run seeded minibatch training and return a TrainReport.

    ``model`` is a LagrangianNetwork or any object with the trainable
    protocol.  ``dataset`` is a list of trajectories.  A checkpoint is
    written after every epoch when ``out_dir`` is given; on divergence the
    last good checkpoint survives and TrainingDiverged is raised.
    """
    start = time.perf_counter()
    Q, QD, A = flatten_dataset(dataset)
    n_total = Q.shape[0]
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n_total)
    n_train = int(np.floor(config.split * n_total))
    if n_train < 1 or n_total - n_train < 1:
        raise UsageError(
            f"split {config.split} leaves an empty side for {n_total} samples"
        )
    train_idx, val_idx = perm[:n_train], perm[n_train:]
    Qt, QDt, At = Q[train_idx], QD[train_idx], A[train_idx]
    val_set = (Q[val_idx], QD[val_idx], A[val_idx])

    if config.standardize:
        if not isinstance(model, LagrangianNetwork):
            raise UsageError("standardize is only supported for network models")
        model = _standardized_network(model, Qt, QDt)

    trainable = _model_for(model)
    arrays = [a.copy() for a in trainable.parameter_arrays]
    optimizer = AdamOptimizer(arrays)
    degenerate_events = 0
    train_losses = []
    val_losses = []
    initial_val_loss = evaluate(arrays, trainable, val_set)

    def checkpoint(current_arrays):
        if out_dir is None:
            return
        current = trainable.with_arrays(current_arrays)
        target = Path(out_dir) / "checkpoint.json"
        if hasattr(current, "network"):
            save_checkpoint(target, current.network)
        elif hasattr(current, "config"):
            from .network import LagrangianNetwork as _Net

            save_checkpoint(target, _Net(current.config, current.params))

    checkpoint(arrays)

    batch_size = min(config.batch_size, n_train)
    steps_per_epoch = max(n_train // batch_size, 1)

    for epoch in range(config.epochs):
        lr = config.lr_initial * config.lr_decay**epoch
        order = rng.permutation(n_train)
        epoch_losses = np.empty(steps_per_epoch)
        for step in range(steps_per_epoch):
            sel = order[step * batch_size : (step + 1) * batch_size]
            Qb, QDb, Ab = Qt[sel], QDt[sel], At[sel]
            aux = {}

            def loss_fn(*arrs):
                value, h_vv = _loss_node(trainable, list(arrs), Qb, QDb, Ab)
                aux["h_vv"] = h_vv
                return value

            value, vjp = make_vjp(loss_fn, tuple(arrays))
            loss_value = float(raw_value(value))
            if not np.isfinite(loss_value):
                checkpoint_path = Path(out_dir) / "checkpoint.json" if out_dir else None
                raise TrainingDiverged(
                    f"non-finite loss {loss_value} at step {step}"
                    + (f"; last good checkpoint: {checkpoint_path}" if checkpoint_path else ""),
                    epoch,
                    last_good_parameters=arrays,
                )
            grads = [np.asarray(raw_value(g)) for g in vjp(1.0)]
            _, degenerate = hessian_diagnostics(aux["h_vv"])
            degenerate_events += int(np.count_nonzero(degenerate))
            arrays = optimizer.step(arrays, grads, lr)
            epoch_losses[step] = loss_value
        train_losses.append(float(epoch_losses.mean()))
        val_losses.append(evaluate(arrays, trainable, val_set))
        checkpoint(arrays)

    report = TrainReport(
        train_loss=train_losses,
        val_loss=val_losses,
        config=config,
        seed=config.seed,
        degenerate_events=degenerate_events,
        wall_seconds=time.perf_counter() - start,
        initial_val_loss=initial_val_loss,
        final_arrays=arrays,
    )
    return report


def save_report(out_dir, report):
    """Write the JSON report and the epoch,train_loss,val_loss CSV."""
    out_dir = Path(out_dir)
    payload = {
        "format_version": REPORT_FORMAT_VERSION,
        "config": report.config.as_dict(),
        "train_loss": report.train_loss,
        "val_loss": report.val_loss,
        "initial_val_loss": report.initial_val_loss,
        "seed": report.seed,
        "degenerate_events": report.degenerate_events,
        "wall_seconds": report.wall_seconds,
    }
    (out_dir / "report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    lines = ["epoch,train_loss,val_loss"]
    for epoch, (tl, vl) in enumerate(zip(report.train_loss, report.val_loss)):
        lines.append(f"{epoch},{format(tl, '.17g')},{format(vl, '.17g')}")
    (out_dir / "loss_curve.csv").write_text(
        "\n".join(lines) + "\n", encoding="utf-8"
    )
