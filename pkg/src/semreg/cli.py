"""Command-line interface: the full pipeline as subcommands.

Machine output goes to files only; progress lines go to stderr. Every run
persists its resolved flags as config.json next to its outputs so it can
be replayed bit-identically. Exit codes: 0 ok, 1 I/O failure, 2 bad flags
or missing inputs, 3 divergence (NaN loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import synth
from .core import (DisplacementField, Image, LabelMap, load_field, load_image,
                   load_labels, save_field, save_image, save_labels, save_pgm)
from .evaluation import (aggregate_row, evaluate_pairs, evaluate_run,
                         write_report_csv)
from .models import UNet, load_checkpoint, pixel_accuracy, save_checkpoint, \
    train_segmentation
from .registration import (DivergenceError, IterConfig, TrainConfig,
                           register_iterative, train_registration)
from .similarity import MetricKind, parse_metric
from .core import Rng


class CliError(Exception):
    """Bad flags or missing inputs; maps to exit code 2."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_config(out_dir: str, subcommand: str, args: argparse.Namespace) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func" and k != "subcommand"}
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump({"subcommand": subcommand, "flags": flags}, f,
                  indent=2, sort_keys=True)


def argv_from_config(config: dict) -> list[str]:
    """Rebuild the argv of a persisted run for bit-identical replay."""
    argv = [config["subcommand"]]
    for key, value in sorted(config["flags"].items()):
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif value is not None:
            argv.extend([flag, str(value)])
    return argv


def _resolve_metric(spec: str) -> MetricKind:
    parts = spec.split(":")
    if parts[0] == "deepsim":
        if len(parts) < 2:
            raise CliError("deepsim metric needs a checkpoint: deepsim:<ckpt>")
        topo = os.path.join(parts[1], "topology.json")
        if not os.path.exists(topo):
            raise CliError(f"missing feature-extractor checkpoint: {parts[1]}")
    try:
        return parse_metric(spec)
    except ValueError as e:
        raise CliError(str(e)) from e


def _metric_label(spec: str) -> str:
    parts = spec.split(":")
    if parts[0] in ("deepsim", "randsim"):
        return parts[0]
    return "-".join(parts)


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

_SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}


def _pair_dir(root: str, split: str, i: int) -> str:
    return os.path.join(root, split, f"pair_{i:03d}")


def _save_pair(path: str, pair) -> None:
    moving, labels_m, fixed, labels_f, truth = pair
    os.makedirs(path, exist_ok=True)
    save_image(os.path.join(path, "moving.semt"), moving)
    save_image(os.path.join(path, "fixed.semt"), fixed)
    save_labels(os.path.join(path, "moving_labels.semt"), labels_m)
    save_labels(os.path.join(path, "fixed_labels.semt"), labels_f)
    save_field(os.path.join(path, "truth.semt"), truth)


def load_dataset(root: str, split: str):
    """List of (moving, moving_labels, fixed, fixed_labels, truth)."""
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CliError(f"missing dataset manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    k = manifest["num_classes"]
    pairs = []
    for name in manifest["splits"].get(split, []):
        path = os.path.join(root, split, name)
        pairs.append((
            load_image(os.path.join(path, "moving.semt")),
            load_labels(os.path.join(path, "moving_labels.semt"), k),
            load_image(os.path.join(path, "fixed.semt")),
            load_labels(os.path.join(path, "fixed_labels.semt"), k),
            load_field(os.path.join(path, "truth.semt")),
        ))
    return pairs


def cmd_gen_data(args) -> int:
    scene = synth.SceneSpec(
        height=args.size, width=args.size, num_blobs=args.num_blobs,
        num_classes=args.num_classes, noise_sigma=args.noise_sigma,
        seed=args.seed)
    warp_spec = synth.WarpSpec(amplitude=args.amplitude,
                               smoothness_sigma=args.smoothness,
                               seed=args.seed + 1)
    manifest = {"splits": {}, "num_classes": args.num_classes,
                "size": args.size, "seed": args.seed}
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    for split, n in counts.items():
        names = []
        for i in range(n):
            pair = synth.make_pair(scene, warp_spec, _SPLIT_OFFSETS[split] + i)
            _save_pair(_pair_dir(args.out, split, i), pair)
            names.append(f"pair_{i:03d}")
        manifest["splits"][split] = names
        _log(f"gen-data: wrote {n} {split} pairs")
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    _write_config(args.out, "gen-data", args)
    return 0


def cmd_train_seg(args) -> int:
    train = load_dataset(args.data, "train")
    if not train:
        raise CliError("train split is empty")
    # both images of every pair are segmentation samples
    samples = []
    for moving, labels_m, fixed, labels_f, _ in train:
        samples.append((moving, labels_m))
        samples.append((fixed, labels_f))
    with open(os.path.join(args.data, "manifest.json")) as f:
        num_classes = json.load(f)["num_classes"]
    net = UNet(1, num_classes, Rng(args.seed))
    _log(f"train-seg: {len(samples)} samples, {args.epochs} epochs")
    net, trace = train_segmentation(net, samples, args.epochs, args.lr,
                                    Rng(args.seed).split(1))
    net.frozen = True
    save_checkpoint(args.out, net, "seg", num_classes)
    with open(os.path.join(args.out, "trace.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(trace):
            writer.writerow([i + 1, loss])
    _write_config(args.out, "train-seg", args)
    _log(f"train-seg: final loss {trace[-1]:.4f}" if trace else "train-seg: no epochs")
    return 0


def _reg_dataset(pairs):
    return [(m, f, lm, lf) for m, lm, f, lf, _ in pairs]


def cmd_train_reg(args) -> int:
    metric = _resolve_metric(args.metric)
    pairs = load_dataset(args.data, "train")
    if not pairs:
        raise CliError("train split is empty")
    config = TrainConfig(epochs=args.epochs, lr=args.lr, lam=args.lam,
                         metric=metric, seed=args.seed)
    net = UNet(2, 2, Rng(args.seed), zero_head=True)
    _log(f"train-reg: metric {args.metric}, {len(pairs)} pairs, {args.epochs} epochs")
    net, trace = train_registration(net, _reg_dataset(pairs), config)
    save_checkpoint(args.out, net, "reg")
    with open(os.path.join(args.out, "trace.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "total"])
        for i, total in enumerate(trace):
            writer.writerow([i, total])
    from .figures import save_convergence_figure

    save_convergence_figure({_metric_label(args.metric): trace},
                            os.path.join(args.out, "convergence.png"))
    _write_config(args.out, "train-reg", args)
    return 0


def _write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "data", "reg", "total"])
        for i, terms in enumerate(trace):
            writer.writerow([i, terms.data, terms.reg, terms.total])


def cmd_register(args) -> int:
    metric = _resolve_metric(args.metric)
    moving = load_image(args.moving)
    fixed = load_image(args.fixed)
    labels_m = labels_f = None
    if metric.needs_labels:
        if not args.moving_labels or not args.fixed_labels:
            raise CliError("nccsup requires --moving-labels and --fixed-labels")
        labels_m = load_labels(args.moving_labels, args.num_classes)
        labels_f = load_labels(args.fixed_labels, args.num_classes)
    config = IterConfig(steps=args.steps, lr=args.lr, lam=args.lam, metric=metric)
    result = register_iterative(moving, fixed, config, labels_m, labels_f)
    os.makedirs(args.out, exist_ok=True)
    save_field(os.path.join(args.out, "field.semt"), result.field)
    _write_trace(os.path.join(args.out, "trace.csv"), result.trace)
    _write_config(args.out, "register", args)
    _log(f"register: total {result.trace[0].total:.5f} -> {result.trace[-1].total:.5f} "
         f"in {result.wall_time:.1f}s")
    return 0


def _load_run_fields(runs_dir: str, label: str, n: int):
    fields = []
    for i in range(n):
        path = os.path.join(runs_dir, label, f"pair_{i:03d}", "field.semt")
        if not os.path.exists(path):
            raise CliError(f"missing field for run {label!r}: {path}")
        fields.append(load_field(path))
    return fields


def _emit_report(pairs, fields_by_metric, deepsim_name, out_dir, direction):
    rows = evaluate_run(pairs, fields_by_metric, deepsim_name, direction)
    os.makedirs(out_dir, exist_ok=True)
    write_report_csv(rows, os.path.join(out_dir, "report.csv"))
    # reference aggregates and figures alongside the delimited output
    scored = {name: evaluate_pairs(pairs, fields)
              for name, fields in fields_by_metric.items()}
    with open(os.path.join(out_dir, "reference.json"), "w") as f:
        json.dump(aggregate_row(deepsim_name, scored[deepsim_name]), f,
                  indent=2, sort_keys=True)
    from .figures import save_dice_figure, save_grid_figure

    save_dice_figure({n: [r.dice_post for r in res] for n, res in scored.items()},
                     os.path.join(out_dir, "dice.png"))
    for name, fields in fields_by_metric.items():
        save_grid_figure(fields[0], os.path.join(out_dir, f"grid_{name}.png"),
                         background=pairs[0][2])
        from .evaluation import render_grid

        save_pgm(render_grid(fields[0]), os.path.join(out_dir, f"grid_{name}.pgm"))
    return rows


def cmd_evaluate(args) -> int:
    pairs = load_dataset(args.data, args.split)
    if not pairs:
        raise CliError(f"{args.split} split is empty")
    labels = [d for d in sorted(os.listdir(args.runs))
              if os.path.isdir(os.path.join(args.runs, d))]
    if args.deepsim_name not in labels:
        raise CliError(f"reference run {args.deepsim_name!r} not found in {args.runs}")
    fields_by_metric = {label: _load_run_fields(args.runs, label, len(pairs))
                        for label in labels}
    _emit_report(pairs, fields_by_metric, args.deepsim_name, args.out,
                 args.direction)
    _write_config(args.out, "evaluate", args)
    return 0


def cmd_render_grid(args) -> int:
    from .evaluation import render_grid

    field = load_field(args.field)
    image = render_grid(field, args.spacing)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_pgm(image, args.out)
    _write_config(os.path.dirname(os.path.abspath(args.out)), "render-grid", args)
    return 0


def cmd_compare_metrics(args) -> int:
    metric_specs = [m for m in args.metrics.split(",") if m]
    if not metric_specs:
        raise CliError("no metrics given")
    labels = [_metric_label(m) for m in metric_specs]
    if len(set(labels)) != len(labels):
        raise CliError("duplicate metric labels")
    deepsim_label = args.deepsim_name
    if deepsim_label not in labels:
        raise CliError(f"reference metric {deepsim_label!r} not among --metrics")
    pairs = load_dataset(args.data, args.split)
    if not pairs:
        raise CliError(f"{args.split} split is empty")
    fields_by_metric = {}
    for spec, label in zip(metric_specs, labels):
        metric = _resolve_metric(spec)
        config = IterConfig(steps=args.steps, lr=args.lr, lam=args.lam,
                            metric=metric)
        fields = []
        for i, (moving, labels_m, fixed, labels_f, _) in enumerate(pairs):
            lm = labels_m if metric.needs_labels else None
            lf = labels_f if metric.needs_labels else None
            result = register_iterative(moving, fixed, config, lm, lf)
            run_dir = os.path.join(args.out, label, f"pair_{i:03d}")
            os.makedirs(run_dir, exist_ok=True)
            save_field(os.path.join(run_dir, "field.semt"), result.field)
            _write_trace(os.path.join(run_dir, "trace.csv"), result.trace)
            fields.append(result.field)
        _log(f"compare-metrics: registered {len(pairs)} pairs with {label}")
        fields_by_metric[label] = fields
    _emit_report(pairs, fields_by_metric, deepsim_label, args.out, args.direction)
    _write_config(args.out, "compare-metrics", args)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semreg",
        description="Deformable registration with a learned semantic similarity metric")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=2)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-blobs", type=int, default=5)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--amplitude", type=float, default=4.0)
    p.add_argument("--smoothness", type=float, default=18.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-seg", help="train the segmentation feature extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-reg", help="train the registration network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_reg)

    p = sub.add_parser("register", help="iterative per-pair registration")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving-labels")
    p.add_argument("--fixed-labels")
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--metric", default="mse")
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score registered fields and emit report")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--runs", required=True)
    p.add_argument("--deepsim-name", default="deepsim")
    p.add_argument("--direction", default="greater", choices=["greater", "less"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render-grid", help="morphed grid-line visualization")
    p.add_argument("--field", required=True)
    p.add_argument("--spacing", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_grid)

    p = sub.add_parser("compare-metrics",
                       help="register the test split with each metric, then evaluate")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metrics", required=True,
                   help="comma-separated metric specs, e.g. mse,ncc:9,deepsim:seg.ckpt")
    p.add_argument("--deepsim-name", default="deepsim")
    p.add_argument("--direction", default="greater", choices=["greater", "less"])
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_metrics)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        _log(f"error: {e}")
        return 2
    except DivergenceError as e:
        _log(f"error: {e}")
        return 3
    except OSError as e:
        _log(f"I/O error: {e}")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
