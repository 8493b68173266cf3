"""Figure rendering for the file-based workflows.

Every report-producing command writes a PNG next to its delimited output:
loss curves for training, trajectory-plus-energy panels for rollouts, a
drift summary for evaluation and a preview for generated datasets.  PNG is
used because its output is deterministic for identical inputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_loss_figure",
    "save_rollout_figure",
    "save_dataset_preview",
    "save_eval_figure",
]


def save_loss_figure(path, train_loss, val_loss, initial_val_loss=None):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    epochs = np.arange(1, len(train_loss) + 1)
    ax.plot(epochs, train_loss, label="train", lw=1.5)
    ax.plot(epochs, val_loss, label="validation", lw=1.5)
    if initial_val_loss is not None and np.isfinite(initial_val_loss):
        ax.axhline(initial_val_loss, color="gray", ls="--", lw=1.0,
                   label="validation at init")
    if len(train_loss) > 0 and min(min(train_loss), min(val_loss)) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("acceleration-matching loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_rollout_figure(path, trajectory, energies):
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.5, 5.5), sharex=True)
    for i in range(min(trajectory.dim, 6)):
        ax1.plot(trajectory.times, trajectory.q[:, i], lw=1.2, label=f"q{i}")
    ax1.set_ylabel("coordinates")
    ax1.legend(frameon=False, ncol=3, fontsize=8)
    ax2.plot(trajectory.times, energies, lw=1.2, color="tab:red")
    ax2.set_xlabel("time")
    ax2.set_ylabel("energy H")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_dataset_preview(path, trajectories, max_shown=4):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for k, traj in enumerate(trajectories[:max_shown]):
        for i in range(min(traj.dim, 3)):
            label = f"traj {k} q{i}" if traj.dim <= 3 else None
            ax.plot(traj.times, traj.q[:, i], lw=1.0, label=label)
    ax.set_xlabel("time")
    ax.set_ylabel("coordinates")
    handles, _ = ax.get_legend_handles_labels()
    if handles:
        ax.legend(frameon=False, fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(path, mean_loss, drifts):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if drifts:
        ax.bar(np.arange(len(drifts)), drifts, color="tab:blue")
        ax.set_yscale("log")
    ax.set_xlabel("rollout index")
    ax.set_ylabel("relative energy drift")
    ax.set_title(f"mean acceleration loss: {mean_loss:.3e}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
