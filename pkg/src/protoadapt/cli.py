"""Command-line front end: data generation, source pre-training, adaptation,
evaluation, and ablation sweeps with reproducible run directories.

Exit codes: 0 success, 2 usage or configuration error, 3 quality gate
failure, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, accesslog
from .data import (
    PretrainConfig,
    ShiftSpec,
    attach_labels,
    generate_shifted_pair,
    pretrain_source,
    read_dataset,
    read_labels,
    write_dataset,
    write_labels,
)
from .errors import (
    ConfigurationError,
    DatasetParseError,
    InvalidInputError,
    PretrainAccuracyError,
    TrainingDivergedError,
    UsageError,
)
from .network import load_model, save_model
from .trainer import AdaptConfig, adapt, evaluate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_QUALITY_GATE = 3
EXIT_DIVERGED = 4

ALPHA_SWEEP_POINTS = ("0", "0.2", "0.4", "0.6", "0.8", "1.0", "dynamic")
UPDATE_PERIOD_SWEEP_POINTS = ("10", "100", "1000", "3000")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


class Manifest:
    """Run metadata written before work starts and finalized when it ends."""

    def __init__(self, out_dir: Path, command: str, config: dict, seed: int, inputs: list[Path]):
        self.path = out_dir / "manifest.json"
        self.doc = {
            "tool": "protoadapt",
            "version": __version__,
            "command": command,
            "config": config,
            "seed": seed,
            "input_digests": {str(p): _sha256(p) for p in inputs},
            "started_at": _utc_now(),
            "finished_at": None,
            "status": "running",
            "files_read": [],
        }
        self._write()

    def finish(self, status: str = "ok") -> None:
        self.doc["finished_at"] = _utc_now()
        self.doc["status"] = status
        self.doc["files_read"] = accesslog.reads()
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.doc, indent=2) + "\n", encoding="utf-8")


def _prepare_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and not force:
        raise UsageError(f"output directory {out_dir} already exists (use --force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)


def _spec_from_args(args) -> ShiftSpec:
    if args.preset != "blobs-rot35":
        raise ConfigurationError(f"unknown preset {args.preset!r}")
    spec = ShiftSpec(seed=args.seed)
    overrides = {}
    for name, flag in (
        ("family", args.family),
        ("n_classes", args.classes),
        ("rotation_deg", args.rotation),
        ("noise_scale", args.noise),
        ("spread", args.spread),
        ("radius", args.radius),
    ):
        if flag is not None:
            overrides[name] = flag
    if args.translation is not None:
        overrides["translation"] = tuple(args.translation)
    if args.samples is not None:
        overrides["n_source"] = args.samples
        overrides["n_target"] = args.samples
    return dataclasses.replace(spec, **overrides) if overrides else spec


def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args)
    out_dir = Path(args.out)
    _prepare_out_dir(out_dir, args.force)
    accesslog.clear()
    manifest = Manifest(out_dir, "gen-data", dataclasses.asdict(spec), spec.seed, [])
    source, target_train, target_eval = generate_shifted_pair(spec)
    write_dataset(out_dir / "source.csv", source)
    write_dataset(out_dir / "target.csv", target_train)
    write_labels(out_dir / "target.labels.csv", target_eval.ids, target_eval.labels, spec.n_classes)
    manifest.finish()
    print(f"wrote {out_dir}/source.csv ({len(source)} samples)")
    print(f"wrote {out_dir}/target.csv ({len(target_train)} samples)")
    print(f"wrote {out_dir}/target.labels.csv")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    source_path = Path(args.source)
    if not source_path.exists():
        raise UsageError(f"missing source dataset {source_path}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    config = PretrainConfig(
        hidden=tuple(int(h) for h in args.hidden.split(",") if h),
        embed_dim=args.embed_dim,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        holdout_frac=args.holdout,
        seed=args.seed,
    )
    accesslog.clear()
    dataset = read_dataset(source_path, role="source")
    manifest = Manifest(
        out_path.parent, "pretrain", dataclasses.asdict(config), args.seed, [source_path]
    )
    try:
        model = pretrain_source(dataset, config)
    except PretrainAccuracyError as e:
        manifest.finish(status=f"quality-gate: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_QUALITY_GATE
    save_model(out_path, model)
    accuracy = evaluate(model, dataset)
    manifest.finish()
    print(f"source accuracy: {accuracy:.4f}")
    print(json.dumps({"source_accuracy": accuracy, "model": str(out_path)}))
    return EXIT_OK


def _adapt_config_from_args(args, src) -> AdaptConfig:
    if args.alpha == "dynamic":
        alpha = None
    else:
        try:
            alpha = float(args.alpha)
        except ValueError:
            raise ConfigurationError(f"--alpha must be 'dynamic' or a number, got {args.alpha!r}") from None
    return AdaptConfig(
        max_iter=args.max_iter,
        batch_size=args.batch_size,
        update_period=args.update_period,
        lr0=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        alpha=alpha,
        seed=args.seed,
        input_dim=src.extractor.input_dim,
        embed_dim=src.extractor.output_dim,
        n_classes=src.classifier.output_dim,
        log_interval=args.log_interval,
    )


def _run_adapt(model_path: Path, target_path: Path, out_dir: Path, args) -> tuple[int, AdaptConfig]:
    """Shared by cmd_adapt and each sweep point; returns (exit code, config)."""
    accesslog.clear()
    src = load_model(model_path)
    dataset = read_dataset(target_path, role="target-train")
    config = _adapt_config_from_args(args, src)
    manifest = Manifest(
        out_dir, "adapt", dataclasses.asdict(config), config.seed, [model_path, target_path]
    )
    try:
        result = adapt(
            src,
            dataset,
            config,
            run_dir=out_dir,
            dump_labels_path=(out_dir / "labels.jsonl") if args.dump_labels else None,
            dump_memory_path=(out_dir / "memory.jsonl") if args.dump_memory else None,
        )
    except TrainingDivergedError as e:
        manifest.finish(status=f"diverged: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED, config
    save_model(out_dir / "target_model.bin", result.model)
    manifest.finish()
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(
            f"finished {config.max_iter} steps: loss_source={last.loss_source:.4f} "
            f"loss_self={last.loss_self:.4f} confident_ratio={last.confident_ratio:.3f}"
        )
    return EXIT_OK, config


def cmd_adapt(args) -> int:
    model_path = Path(args.source_model)
    target_path = Path(args.target)
    if not model_path.exists():
        raise UsageError(f"missing model file {model_path}")
    if not target_path.exists():
        raise UsageError(f"missing target dataset {target_path}")
    out_dir = Path(args.out)
    _prepare_out_dir(out_dir, args.force)
    code, _ = _run_adapt(model_path, target_path, out_dir, args)
    return code


def cmd_eval(args) -> int:
    model_path = Path(args.model)
    if not model_path.exists():
        raise UsageError(f"missing model file {model_path}")
    model = load_model(model_path)
    features = read_dataset(Path(args.dataset), role="target-eval")
    ids, labels, _ = read_labels(Path(args.labels))
    dataset = attach_labels(features, ids, labels)
    accuracy = evaluate(model, dataset)
    print(f"accuracy: {accuracy:.4f}")
    print(json.dumps({"accuracy": accuracy, "n": len(dataset), "model": str(model_path)}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    model_path = Path(args.source_model)
    target_path = Path(args.target)
    labels_path = Path(args.labels)
    for p in (model_path, target_path, labels_path):
        if not p.exists():
            raise UsageError(f"missing input file {p}")
    out_dir = Path(args.out)
    _prepare_out_dir(out_dir, args.force)
    if args.points:
        points = tuple(args.points.split(","))
    else:
        points = ALPHA_SWEEP_POINTS if args.kind == "alpha" else UPDATE_PERIOD_SWEEP_POINTS
    manifest = Manifest(
        out_dir,
        "sweep",
        {"kind": args.kind, "points": list(points), "repeats": args.repeats},
        args.seed,
        [model_path, target_path, labels_path],
    )

    features = read_dataset(target_path, role="target-eval")
    ids, labels, _ = read_labels(labels_path)
    eval_dataset = attach_labels(features, ids, labels)

    rows = []
    base_seed = args.seed
    for point in points:
        for repeat in range(args.repeats):
            run_args = argparse.Namespace(**vars(args))
            run_args.seed = base_seed + repeat
            if args.kind == "alpha":
                run_args.alpha = point
            else:
                run_args.update_period = int(point)
            run_name = f"{args.kind}-{point}" + (f"-r{repeat}" if args.repeats > 1 else "")
            run_dir = out_dir / run_name
            run_dir.mkdir(parents=True, exist_ok=True)
            code, config = _run_adapt(model_path, target_path, run_dir, run_args)
            if code != EXIT_OK:
                manifest.finish(status=f"run {run_name} failed with exit {code}")
                return code
            final_model = load_model(run_dir / "target_model.bin")
            accuracy = evaluate(final_model, eval_dataset)
            last_ratio = _final_confident_ratio(run_dir / "metrics.jsonl")
            rows.append((point, accuracy, last_ratio, run_args.seed))
            print(f"{args.kind}={point} seed={run_args.seed} accuracy={accuracy:.4f}")

    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sweep_value", "final_accuracy", "confident_ratio_final", "seed"])
        for point, accuracy, ratio, seed in rows:
            writer.writerow([point, repr(accuracy), repr(ratio), seed])
    manifest.finish()
    print(f"wrote {out_dir}/sweep.csv")
    return EXIT_OK


def _final_confident_ratio(metrics_path: Path) -> float:
    last = None
    with open(metrics_path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                last = json.loads(line)
    return float(last["confident_ratio"]) if last else float("nan")


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iter", type=int, default=3000, dest="max_iter")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--update-period", type=int, default=100, dest="update_period")
    p.add_argument("--alpha", default="dynamic", help="'dynamic' or a fixed value in [0, 1]")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4, dest="weight_decay")
    p.add_argument("--log-interval", type=int, default=50, dest="log_interval")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--dump-labels", action="store_true", help="write per-step label records")
    p.add_argument("--dump-memory", action="store_true", help="write prototype dumps per refresh")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoadapt")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic covariate-shift dataset pair")
    g.add_argument("--preset", default="blobs-rot35")
    g.add_argument("--family", choices=("gaussian-mixture", "two-arcs"))
    g.add_argument("--classes", type=int)
    g.add_argument("--rotation", type=float)
    g.add_argument("--translation", type=float, nargs=2, metavar=("DX", "DY"))
    g.add_argument("--noise", type=float)
    g.add_argument("--spread", type=float)
    g.add_argument("--radius", type=float)
    g.add_argument("--samples", type=int, help="samples per domain")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train and freeze the source model")
    p.add_argument("source", help="labeled source dataset CSV")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--hidden", default="32", help="comma-separated hidden layer sizes")
    p.add_argument("--embed-dim", type=int, default=16, dest="embed_dim")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="adapt a frozen source model to an unlabeled target")
    a.add_argument("source_model", help="source model checkpoint")
    a.add_argument("target", help="unlabeled target dataset CSV")
    a.add_argument("-o", "--out", required=True, help="run directory")
    _add_adapt_flags(a)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="evaluate a checkpoint against held-out labels")
    e.add_argument("model")
    e.add_argument("dataset")
    e.add_argument("labels")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run an ablation sweep and tabulate final accuracies")
    s.add_argument("kind", choices=("alpha", "update-period"))
    s.add_argument("source_model")
    s.add_argument("target")
    s.add_argument("labels", help="held-out label sidecar for final accuracy")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--points", help="comma-separated sweep points overriding the defaults")
    s.add_argument("--repeats", type=int, default=1, help="runs per point with derived seeds")
    _add_adapt_flags(s)
    s.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, InvalidInputError, DatasetParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
