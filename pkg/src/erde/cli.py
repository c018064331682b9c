"""Config-driven experiment runner.

Subcommands: train-teacher, train-student, sweep, eval, macs.  Every run
writes its resolved configuration, a provenance record, delimited outputs,
and rendered figures into its own output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (ConfigError, build_splits, data_channels, data_image_hw,
                     echo_config, load_config, parse_config_text, resolve_arch,
                     resolve_exit_map, resolve_loss_weights, resolve_train_config)
from .exits import (SweepConfig, latency_probe, mac_count, sweep, trace_dataset,
                    worker_count)
from .nn import build_network
from .report import format_table_row, render_sweep_figure, render_training_figure
from .train import train
from .weights import load_network, save_weights

_STUDENT_MODES = {"none": "student_no_kd", "kd": "student_kd", "erde": "student_erde"}


class CliError(RuntimeError):
    pass


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _prepare_out_dir(path, force):
    if os.path.exists(path):
        if not force and os.listdir(path):
            raise CliError(f"output directory {path!r} is not empty (use --force)")
    else:
        os.makedirs(path)


def _write_provenance(out_dir, payload):
    payload = dict(payload)
    payload["version"] = __version__
    with open(os.path.join(out_dir, "provenance.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _echo_into(out_dir, resolved):
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(echo_config(resolved))


def _resolve_data_argument(data_arg):
    """--data accepts the literal 'synth' (built-in defaults) or a config path."""
    if data_arg == "synth":
        return parse_config_text("")["data"], None
    if not os.path.exists(data_arg):
        raise CliError(f"data argument {data_arg!r} is neither 'synth' nor an existing file")
    resolved = load_config(data_arg)
    return resolved["data"], data_arg


def _run_training(resolved, mode, out_dir, teacher_path, config_path, command):
    splits = build_splits(resolved["data"])
    channels = data_channels(resolved["data"])
    image_hw = data_image_hw(resolved["data"])
    if image_hw is None:  # idx images: geometry comes from the files
        image_hw = splits.train.images.shape[2:]
    class_count = splits.train.class_count

    teacher = None
    exit_map = None
    inputs = {"config": {"path": config_path, "sha256": _sha256(config_path)}}
    if teacher_path is not None:
        teacher = load_network(teacher_path)
        inputs["teacher"] = {"path": teacher_path, "sha256": _sha256(teacher_path)}
        exit_map = resolve_exit_map(resolved["teacher"])

    section = "teacher" if mode == "teacher" else "model"
    arch = resolve_arch(resolved[section], class_count, channels, image_hw)
    weights = resolve_loss_weights(resolved["loss"])
    train_config = resolve_train_config(resolved["train"], mode, weights, exit_map)

    if teacher is not None and exit_map is None and teacher.n != len(arch.blocks):
        raise CliError(
            f"student has {len(arch.blocks)} exits but teacher has {teacher.n}; "
            "set exit_map in the [teacher] section")

    net = build_network(arch, seed=train_config.seed)
    log = train(net, teacher, splits, train_config)

    weights_path = os.path.join(out_dir, "weights.erde")
    save_weights(net, weights_path)
    log.to_ndjson(os.path.join(out_dir, "train_log.ndjson"))
    render_training_figure(log, os.path.join(out_dir, "training.png"))
    _echo_into(out_dir, resolved)
    _write_provenance(out_dir, {
        "command": command,
        "mode": mode,
        "loss_formula": train_config.loss_formula,
        "seed": train_config.seed,
        "dataset": splits.train.provenance,
        "inputs": inputs,
        "best_epoch": log.best_epoch,
        "best_val_accuracy": log.best_val_accuracy,
    })
    print(f"trained {mode} model: best val acc {log.best_val_accuracy:.4f} "
          f"(epoch {log.best_epoch}); outputs in {out_dir}")
    return 0


def cmd_train_teacher(args):
    resolved = load_config(args.config)
    _prepare_out_dir(args.out, args.force)
    return _run_training(resolved, "teacher", args.out, None, args.config,
                         "train-teacher")


def cmd_train_student(args):
    resolved = load_config(args.config)
    mode = _STUDENT_MODES[args.mode]
    teacher_path = args.teacher
    if mode == "student_no_kd" and teacher_path is not None:
        print("warning: --teacher is ignored for mode 'none'", file=sys.stderr)
        teacher_path = None
    if mode in ("student_kd", "student_erde") and teacher_path is None:
        raise CliError(f"mode {args.mode!r} requires --teacher WEIGHTS")
    _prepare_out_dir(args.out, args.force)
    return _run_training(resolved, mode, args.out, teacher_path, args.config,
                         "train-student")


def _evaluate_model(model_path, data_arg):
    net = load_network(model_path)
    data_section, config_path = _resolve_data_argument(data_arg)
    splits = build_splits(data_section)
    traces = trace_dataset(net, splits.test, workers=worker_count())
    return net, splits, traces, config_path


def cmd_sweep(args):
    if args.theta_min is not None and args.theta_min < 0:
        raise CliError("--theta-min must be nonnegative")
    if args.steps is not None and args.steps < 1:
        raise CliError("--steps must be at least 1")
    _prepare_out_dir(args.out, args.force)
    net, splits, traces, data_config = _evaluate_model(args.model, args.data)

    # flags win; otherwise fall back to the config's [sweep] section
    section = (load_config(data_config) if data_config else parse_config_text(""))["sweep"]
    theta_min = section["theta_min"] if args.theta_min is None else args.theta_min
    theta_max = section["theta_max"] if args.theta_max is None else args.theta_max
    steps = section["steps"] if args.steps is None else args.steps
    if theta_max < 0:
        theta_max = float(np.log(net.class_count))
    if theta_min < 0:
        raise CliError("theta_min must be nonnegative")
    grid = SweepConfig.linear(theta_min, theta_max, steps)
    provenance = {
        "model": {"path": args.model, "sha256": _sha256(args.model)},
        "dataset": splits.test.provenance,
        "version": __version__,
        "threads": worker_count(),
    }
    if args.reference_macs is not None:
        provenance["reference_macs"] = args.reference_macs
    report = sweep(traces, grid, provenance=provenance)
    report.to_csv(os.path.join(args.out, "sweep.csv"))
    report.to_json(os.path.join(args.out, "sweep.json"))
    render_sweep_figure(report, os.path.join(args.out, "sweep.png"))
    resolved = parse_config_text("")
    if data_config is not None:
        resolved = load_config(data_config)
    resolved["sweep"]["theta_min"] = theta_min
    resolved["sweep"]["theta_max"] = theta_max
    resolved["sweep"]["steps"] = steps
    _echo_into(args.out, resolved)
    print(f"sweep over {steps} thresholds written to {args.out}")
    return 0


def cmd_eval(args):
    if args.theta < 0:
        raise CliError("--theta must be nonnegative")
    net, splits, traces, _ = _evaluate_model(args.model, args.data)
    report = sweep(traces, SweepConfig((args.theta,)))
    row = report.rows[0]
    print(f"theta={row.theta}  accuracy={row.accuracy:.4f}  avg_macs={row.avg_macs:.1f}")
    print("exit histogram: " + " ".join(
        f"exit{i + 1}={c}" for i, c in enumerate(row.exit_counts)))
    print(f"mean exit index: {row.mean_exit_index:.4f}")
    if args.reference_macs is not None:
        print(format_table_row(args.approach, row.accuracy, row.avg_macs,
                               args.reference_macs))
    if args.latency_reps:
        probe = latency_probe(net, splits.test, args.theta, args.latency_reps)
        print(f"latency: mean {probe.mean_seconds * 1e3:.3f} ms "
              f"(std {probe.std_seconds * 1e3:.3f} ms, n={probe.repetitions}) "
              f"on {probe.host}")
    return 0


def cmd_macs(args):
    resolved = load_config(args.config)
    channels = data_channels(resolved["data"])
    image_hw = data_image_hw(resolved["data"]) or (
        resolved["data"]["height"], resolved["data"]["width"])
    arch = resolve_arch(resolved["model"], resolved["data"]["classes"],
                        channels, image_hw)
    net = build_network(arch, seed=0)
    table = mac_count(net)
    for name, macs in table.rows:
        print(f"{name:<20} {macs:>12}")
    for i, cum in enumerate(table.exit_cumulative, start=1):
        print(f"through exit {i:<7} {cum:>12}")
    print(f"{'full network':<20} {table.full_network:>12}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="erde",
        description="entropy-regularized distillation for early-exit classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a multi-exit teacher with joint CE")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train a student (none/kd/erde)")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", default=None)
    p.add_argument("--mode", required=True, choices=sorted(_STUDENT_MODES))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("sweep", help="threshold sweep: accuracy vs average MACs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="'synth' or a config file path")
    p.add_argument("--theta-min", type=float, default=None)
    p.add_argument("--theta-max", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--reference-macs", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="single-threshold evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--latency-reps", type=int, default=0)
    p.add_argument("--reference-macs", type=float, default=None)
    p.add_argument("--approach", default="model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("macs", help="print the per-layer MAC table")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_macs)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
