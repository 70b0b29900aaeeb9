"""Command-line entry point: ``bnnlab {train,grid,eval,export,bench,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import harness as H
from .errors import BnnError, FormatError
from .graph import Mode, forward
from .modelio import load_model, save_model
from .packed import MAGIC as PACKED_MAGIC
from .packed import benchmark, export_packed, load_packed, packed_forward, save_packed


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--dataset", choices=D.DATASETS)
    p.add_argument("--arch")
    p.add_argument("--widths", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated, e.g. 512,512,512")
    p.add_argument("--algo", dest="algorithm", choices=["bp", "dfa", "drtp", "hsic", "sigproptl"])
    p.add_argument("--binary-weights", dest="binarize_weights", action="store_true", default=None)
    p.add_argument("--binary-acts", dest="binary_activations", action="store_true", default=None)
    p.add_argument("--skip", dest="skip_connections", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--clip-latent", dest="clip_latent", action="store_true", default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-limit", dest="train_limit", type=int)
    p.add_argument("--data-root", dest="data_root", help=f"dataset directory (default ${D.DATA_ROOT_ENV} or ./data)")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")


_CONFIG_KEYS = ("dataset", "arch", "widths", "algorithm", "binarize_weights", "binary_activations",
                "skip_connections", "clip_latent", "lr", "gamma", "alpha", "epochs", "batch_size", "seed",
                "train_limit", "data_root")


def config_from_args(args: argparse.Namespace) -> H.ExperimentConfig:
    base = H.ExperimentConfig.from_file(args.config).to_dict() if args.config else {}
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS if getattr(args, k, None) is not None}
    return H.ExperimentConfig.from_dict({**base, **overrides})


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    record, model = H.run_experiment(cfg, progress=True)
    args.out.mkdir(parents=True, exist_ok=True)
    record.save(args.out / "run.json")
    save_model(model, args.out / "model.bgr1")
    print(json.dumps({"test_accuracy": record.test_accuracy, "best_val_accuracy": record.best_val_accuracy,
                      "failed": record.failed, "out": str(args.out)}))
    return 1 if record.failed else 0


def cmd_grid(args) -> int:
    cfg = config_from_args(args)
    result = H.grid_search(cfg, repeats=args.repeats, grid_epochs=args.grid_epochs)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(result.search_runs):
        r.save(args.out / f"search_{i:02d}.json")
    for i, r in enumerate(result.final_runs):
        r.save(args.out / f"final_{i:02d}.json")
    (args.out / "best_config.json").write_text(json.dumps(result.best.to_dict(), indent=2, sort_keys=True))
    (args.out / "summary.csv").write_bytes(H.report(result.final_runs, "csv"))
    sys.stdout.write(H.report(result.final_runs, "table").decode())
    return 0


def _normalizer_for(model_file: Path, record: Path | None) -> D.Normalizer:
    path = record or model_file.with_name("run.json")
    if not path.exists():
        raise FileNotFoundError(f"no run record at {path}; pass --record to supply the input normalization")
    norm = H.RunRecord.load(path).normalization
    return D.Normalizer(np.asarray(norm["mean"], np.float32), np.asarray(norm["std"], np.float32))


def cmd_eval(args) -> int:
    raw = args.model_file.read_bytes()
    if raw[:4] == PACKED_MAGIC:
        pm = load_packed(args.model_file)
        run = lambda x: packed_forward(pm, x)  # noqa: E731
        kind = "packed"
    else:
        model = load_model(args.model_file)
        run = lambda x: forward(model, x, Mode.EVAL)[0]  # noqa: E731
        kind = "latent"
    norm = _normalizer_for(args.model_file, args.record)
    _, test = D.load_dataset(args.dataset, args.data_root)
    correct = 0
    for idx in D.iterate_batches(len(test), 1000):
        correct += int((run(norm(test.images[idx])).argmax(axis=1) == test.labels[idx]).sum())
    print(json.dumps({"model": kind, "dataset": args.dataset, "test_accuracy": correct / len(test)}))
    return 0


def cmd_export(args) -> int:
    model = load_model(args.model_file)
    pm = export_packed(model)
    size = save_packed(pm, args.out)
    print(json.dumps({"out": str(args.out), "file_bytes": size, "packed_weight_bytes": pm.packed_bytes,
                      "packed_layers": sorted(pm.weights)}))
    return 0


def cmd_bench(args) -> int:
    print(json.dumps(benchmark(args.m, args.k, args.n, args.repeats)))
    return 0


def cmd_report(args) -> int:
    paths = []
    for p in args.records:
        paths += sorted(p.glob("*.json")) if p.is_dir() else [p]
    records = []
    for p in paths:
        d = json.loads(p.read_text())
        if "config" in d and "seed" in d:
            records.append(H.RunRecord.from_dict(d))
    if not records:
        raise FileNotFoundError("no run records found")
    out = H.report(records, args.format, timing=args.timing)
    if args.out:
        args.out.write_bytes(out)
    else:
        sys.stdout.write(out.decode())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnlab", description="Binary neural network training and inference")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="grid search, then repeat the winner over several seeds")
    _add_run_options(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--grid-epochs", dest="grid_epochs", type=int, help="epochs for the search runs only")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="test accuracy of a latent (.bgr1) or packed (.bgrp) model file")
    p.add_argument("--model-file", required=True, type=Path)
    p.add_argument("--record", type=Path, help="run record holding the input normalization")
    p.add_argument("--dataset", default="mnist", choices=D.DATASETS)
    p.add_argument("--data-root")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="convert a latent model file to a packed one")
    p.add_argument("--model-file", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="single-thread packed vs float matmul timing")
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--k", type=int, default=1024)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="aggregate run records")
    p.add_argument("records", nargs="+", type=Path, help="run record files or directories")
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")
    p.add_argument("--timing", action="store_true", help="include wall-clock seconds")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (BnnError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
