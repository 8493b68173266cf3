"""Command-line front end: data generation, training, evaluation, rollouts.

Every command is file-based and seed-deterministic; re-running a command
with the same resolved configuration produces identical outputs, and the
fully resolved configuration is written as JSON next to the outputs.

Exit codes: 0 success, 2 usage/validation, 3 I/O failure, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .dynamics import PhaseState, energy_series
from .errors import NumericError, RolloutError, TrainingDiverged, UsageError
from .network import (
    LagrangianNetwork,
    NetworkConfig,
    desk_config,
    load_checkpoint,
    paper_config,
    save_checkpoint,
)
from .reporting import (
    save_dataset_preview,
    save_eval_figure,
    save_loss_figure,
    save_rollout_figure,
)
from .systems import (
    SYSTEM_NAMES,
    generate_trajectories,
    make_system,
    read_dataset,
    rollout as run_rollout,
    write_dataset,
)
from .training import (
    NetworkDynamicsModel,
    TrainConfig,
    evaluate,
    save_report,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _load_config_file(path):
    p = Path(path)
    raw = p.read_bytes()
    suffix = p.suffix.lower()
    if suffix == ".toml":
        return tomllib.loads(raw.decode("utf-8"))
    if suffix == ".json":
        return json.loads(raw.decode("utf-8"))
    try:
        return json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError:
        try:
            return tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"config file {path} is neither JSON nor TOML: {exc}")


def _resolve(args, defaults, required):
    """Merge defaults < config file < explicit CLI flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    missing = [k for k in required if resolved.get(k) is None]
    if missing:
        raise UsageError(f"missing required settings: {', '.join(missing)}")
    return resolved


def _write_resolved(out_dir, resolved):
    (Path(out_dir) / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _make_named_system(resolved):
    name = resolved["system"]
    if name == "wave1d":
        return make_system(name, n=int(resolved["grid_sites"]),
                           dx=float(resolved["grid_dx"]))
    return make_system(name)


def _dataset_path(data):
    p = Path(data)
    if p.is_dir():
        return p / "dataset.csv"
    return p


# -- commands ---------------------------------------------------------------


def cmd_gen(args):
    defaults = {
        "system": None,
        "count": 10,
        "steps": 100,
        "dt": 0.01,
        "seed": None,
        "out": None,
        "grid_sites": 16,
        "grid_dx": 1.0,
    }
    resolved = _resolve(args, defaults, required=("system", "seed", "out"))
    system = _make_named_system(resolved)
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    trajectories = generate_trajectories(
        system,
        count=int(resolved["count"]),
        h=float(resolved["dt"]),
        steps=int(resolved["steps"]),
        seed=int(resolved["seed"]),
    )
    meta = {
        "system": system.name,
        "d": system.dim,
        "h": float(resolved["dt"]),
        "steps": int(resolved["steps"]),
        "count": int(resolved["count"]),
        "seed": int(resolved["seed"]),
        "sampler_ranges": {k: list(v) for k, v in system.sampler_ranges.items()},
        "constants": system.constants,
    }
    write_dataset(out / "dataset.csv", trajectories, meta)
    _write_resolved(out, resolved)
    save_dataset_preview(out / "dataset_preview.png", trajectories)
    rows = sum(t.times.size for t in trajectories)
    print(f"wrote {len(trajectories)} trajectories ({rows} rows) to {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_train(args):
    defaults = {
        "data": None,
        "preset": "desk",
        "epochs": None,
        "seed": None,
        "out": None,
        "batch_size": 32,
        "lr_initial": 1e-3,
        "lr_decay": 0.99,
        "split": 0.9,
        "activation": "softplus",
        "standardize": False,
    }
    resolved = _resolve(args, defaults, required=("data", "epochs", "seed", "out"))
    if resolved["preset"] not in ("desk", "paper"):
        raise UsageError(f"unknown preset {resolved['preset']!r}; use desk or paper")
    trajectories, _meta = read_dataset(_dataset_path(resolved["data"]))
    d = trajectories[0].dim
    preset = desk_config if resolved["preset"] == "desk" else paper_config
    net_config = preset(2 * d, activation=resolved["activation"],
                        seed=int(resolved["seed"]))
    network = LagrangianNetwork(net_config)
    train_config = TrainConfig(
        epochs=int(resolved["epochs"]),
        seed=int(resolved["seed"]),
        batch_size=int(resolved["batch_size"]),
        lr_initial=float(resolved["lr_initial"]),
        lr_decay=float(resolved["lr_decay"]),
        split=float(resolved["split"]),
        standardize=bool(resolved["standardize"]),
    )
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, resolved)
    report = train(network, trajectories, train_config, out_dir=out)
    save_report(out, report)
    save_loss_figure(out / "loss_curve.png", report.train_loss, report.val_loss,
                     report.initial_val_loss)
    final = report.val_loss[-1] if report.val_loss else report.initial_val_loss
    print(
        f"trained {train_config.epochs} epochs; validation loss "
        f"{report.initial_val_loss:.6g} -> {final:.6g}; "
        f"checkpoint at {out / 'checkpoint.json'}"
    )
    return EXIT_OK


def cmd_eval(args):
    defaults = {
        "checkpoint": None,
        "data": None,
        "out": None,
        "rollouts": 5,
    }
    resolved = _resolve(args, defaults, required=("checkpoint", "data"))
    network = load_checkpoint(resolved["checkpoint"])
    trajectories, meta = read_dataset(_dataset_path(resolved["data"]))
    d = trajectories[0].dim
    if 2 * d != network.config.input_dim:
        raise UsageError(
            f"checkpoint expects input_dim {network.config.input_dim} but the "
            f"dataset has d={d} (needs input_dim {2 * d})"
        )
    out = Path(resolved["out"]) if resolved["out"] else Path(resolved["checkpoint"]).parent
    out.mkdir(parents=True, exist_ok=True)
    resolved["out"] = str(out)

    mean_loss = evaluate(network.params.arrays, NetworkDynamicsModel(network),
                         trajectories)
    drifts = []
    failures = 0
    for traj in trajectories[: int(resolved["rollouts"])]:
        steps = traj.times.size - 1
        if steps < 1:
            continue
        try:
            result = run_rollout(network, traj.state(0), traj.timestep, steps)
        except (RolloutError, NumericError):
            failures += 1
            continue
        energies = energy_series(network, result.trajectory.q,
                                 result.trajectory.q_dot)
        scale = max(abs(energies[0]), 1e-12)
        drifts.append(float(np.max(np.abs(energies - energies[0])) / scale))

    metrics = {
        "mean_loss": mean_loss,
        "rollouts_evaluated": len(drifts),
        "rollouts_failed": failures,
        "energy_drift_mean": float(np.mean(drifts)) if drifts else float("nan"),
        "energy_drift_max": float(np.max(drifts)) if drifts else float("nan"),
    }
    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    lines = ["metric,value"]
    for key in sorted(metrics):
        lines.append(f"{key},{format(metrics[key], '.17g')}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_eval_figure(out / "eval_summary.png", mean_loss, drifts)
    _write_resolved(out, resolved)
    print(f"mean loss {mean_loss:.6g}; metrics at {out / 'metrics.json'}")
    return EXIT_OK


def cmd_rollout(args):
    defaults = {
        "checkpoint": None,
        "analytic": None,
        "init": None,
        "dt": 0.01,
        "steps": 100,
        "out": None,
        "grid_sites": 16,
        "grid_dx": 1.0,
    }
    resolved = _resolve(args, defaults, required=("init", "out"))
    if bool(resolved["checkpoint"]) == bool(resolved["analytic"]):
        raise UsageError("provide exactly one of --checkpoint or --analytic")
    try:
        values = [float(v) for v in str(resolved["init"]).split(",")]
    except ValueError as exc:
        raise UsageError(f"malformed --init {resolved['init']!r}: {exc}")

    if resolved["analytic"]:
        system = _make_named_system(
            {**resolved, "system": resolved["analytic"]}
        )
        lagrangian = system.lagrangian
        d = system.dim
    else:
        network = load_checkpoint(resolved["checkpoint"])
        lagrangian = network
        d = network.dim
    if len(values) != 2 * d:
        raise UsageError(
            f"--init needs {2 * d} comma-separated values (q then q_dot), "
            f"got {len(values)}"
        )
    initial = PhaseState(values[:d], values[d:])

    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = run_rollout(lagrangian, initial, float(resolved["dt"]),
                         int(resolved["steps"]))
    traj = result.trajectory
    energies = energy_series(lagrangian, traj.q, traj.q_dot)

    header = ["t"] + [f"q{i}" for i in range(d)] + [f"qd{i}" for i in range(d)] + ["H"]
    lines = [",".join(header)]
    for k in range(traj.times.size):
        row = [format(traj.times[k], ".17g")]
        row += [format(v, ".17g") for v in traj.q[k]]
        row += [format(v, ".17g") for v in traj.q_dot[k]]
        row.append(format(energies[k], ".17g"))
        lines.append(",".join(row))
    (out / "rollout.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_rollout_figure(out / "rollout.png", traj, energies)
    _write_resolved(out, resolved)
    print(
        f"rollout of {int(resolved['steps'])} steps written to "
        f"{out / 'rollout.csv'}",
    )
    print(
        f"degenerate Hessian events: {result.degenerate_events}; "
        f"max condition number: {result.max_condition:.3e}",
        file=sys.stderr,
    )
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lagdyn",
        description="Learn Lagrangian dynamics from trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a trajectory dataset")
    gen.add_argument("--system", choices=SYSTEM_NAMES, help="reference system name")
    gen.add_argument("--count", type=int, help="number of trajectories")
    gen.add_argument("--steps", type=int, help="integration steps per trajectory")
    gen.add_argument("--dt", type=float, help="timestep")
    gen.add_argument("--seed", type=int, help="dataset seed (required)")
    gen.add_argument("--out", help="output directory")
    gen.add_argument("--grid-sites", dest="grid_sites", type=int,
                     help="lattice sites (wave1d only)")
    gen.add_argument("--grid-dx", dest="grid_dx", type=float,
                     help="lattice spacing (wave1d only)")
    gen.add_argument("--config", help="TOML or JSON config file")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a Lagrangian network on a dataset")
    tr.add_argument("--data", help="dataset CSV or its directory")
    tr.add_argument("--preset", choices=("desk", "paper"), help="network preset")
    tr.add_argument("--epochs", type=int, help="training epochs")
    tr.add_argument("--seed", type=int, help="training seed (required)")
    tr.add_argument("--out", help="output directory")
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--lr-initial", dest="lr_initial", type=float)
    tr.add_argument("--lr-decay", dest="lr_decay", type=float)
    tr.add_argument("--split", type=float, help="train fraction")
    tr.add_argument("--activation", choices=("softplus", "tanh", "sigmoid"))
    tr.add_argument("--standardize", action="store_const", const=True,
                    help="standardize network inputs")
    tr.add_argument("--config", help="TOML or JSON config file")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", help="checkpoint JSON path")
    ev.add_argument("--data", help="dataset CSV or its directory")
    ev.add_argument("--out", help="output directory (default: checkpoint dir)")
    ev.add_argument("--rollouts", type=int,
                    help="number of rollouts for drift statistics")
    ev.add_argument("--config", help="TOML or JSON config file")
    ev.set_defaults(func=cmd_eval)

    ro = sub.add_parser("rollout", help="integrate learned or analytic dynamics")
    ro.add_argument("--checkpoint", help="checkpoint JSON path")
    ro.add_argument("--analytic", choices=SYSTEM_NAMES,
                    help="roll out a named analytic system instead")
    ro.add_argument("--init", help="comma-separated initial state: q then q_dot")
    ro.add_argument("--dt", type=float, help="timestep")
    ro.add_argument("--steps", type=int, help="number of steps")
    ro.add_argument("--out", help="output directory")
    ro.add_argument("--grid-sites", dest="grid_sites", type=int,
                    help="lattice sites (wave1d only)")
    ro.add_argument("--grid-dx", dest="grid_dx", type=float,
                    help="lattice spacing (wave1d only)")
    ro.add_argument("--config", help="TOML or JSON config file")
    ro.set_defaults(func=cmd_rollout)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RolloutError as exc:
        print(f"rollout failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
