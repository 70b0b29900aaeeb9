"""Experiment runs, grid search and reporting.

A run is fully determined by its :class:`ExperimentConfig`: the seed is
split into independent streams for model init, feedback matrices, the
train/validation split, batch order and augmentation.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import data as D
from .algorithms import HSIC_GAMMAS, SIGPROP_ALPHAS, Algo, make_strategy
from .errors import ConfigError, NonFiniteError
from .graph import ArchSpec, Mode, ModelGraph, build_model, forward
from .optim import AdamState, adam_update, begin_step
from .tensor import Rng, one_hot, softmax_cross_entropy

log = logging.getLogger(__name__)

LEARNING_RATES = (1e-3, 1e-4, 1e-5)
DEFAULT_EPOCHS = 20


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    arch: str = "mlp_plain"
    widths: tuple = (512, 512, 512)
    binarize_weights: bool = False
    binary_activations: bool = False
    skip_connections: bool = True
    clip_latent: bool = False  # clip binarized latent weights to [-1, 1] after each update
    activation: str | None = None
    patch: int = 4
    algorithm: str = "bp"
    lr: float = 1e-3
    gamma: float = 20.0
    alpha: float = 1.0
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    train_fraction: float = 0.9
    augment: dict | None = None  # None: dataset default
    train_limit: int | None = None  # use only the first N training images
    data_root: str | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        Algo(self.algorithm)
        if self.dataset not in D.DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **kw})

    def augment_config(self) -> D.AugmentConfig:
        if self.augment is None:
            return D.AugmentConfig.for_dataset(self.dataset)
        return D.AugmentConfig(**self.augment)


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list[dict] = field(default_factory=list)
    test_accuracy: float | None = None
    test_loss: float | None = None
    peak_activation_bytes: int = 0
    peak_segments: int = 0
    seconds: float = 0.0
    failed: str | None = None
    normalization: dict | None = None

    @property
    def best_val_accuracy(self) -> float:
        accs = [e["val_accuracy"] for e in self.epochs if e.get("val_accuracy") is not None]
        return max(accs) if accs else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Single run
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _load(name: str, root: str | None):
    return D.load_dataset(name, root)


def arch_spec(cfg: ExperimentConfig, input_shape, num_classes) -> ArchSpec:
    return ArchSpec(arch=cfg.arch, input_shape=tuple(input_shape), num_classes=num_classes, widths=cfg.widths,
                    binarize_weights=cfg.binarize_weights, binary_activations=cfg.binary_activations,
                    skip_connections=cfg.skip_connections, activation=cfg.activation, patch=cfg.patch)


@dataclass
class PreparedData:
    train: D.Dataset
    val: D.Dataset
    test: D.SealedTest
    normalizer: D.Normalizer


def prepare_data(cfg: ExperimentConfig, split_rng: Rng) -> PreparedData:
    full_train, test = _load(cfg.dataset, cfg.data_root)
    if cfg.train_limit:
        full_train = full_train.subset(np.arange(min(cfg.train_limit, len(full_train))))
    train, val = D.split_train_val(full_train, cfg.train_fraction, split_rng)
    return PreparedData(train, val, D.SealedTest(test), D.Normalizer.fit(train))


def evaluate(model: ModelGraph, ds: D.Dataset, normalizer: D.Normalizer, batch_size: int = 1000):
    """Mean loss and accuracy in eval mode (no augmentation, ever)."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    loss_sum, correct = 0.0, 0
    for idx in D.iterate_batches(len(ds), batch_size):
        logits, _ = forward(model, normalizer(ds.images[idx]), Mode.EVAL)
        labels = ds.labels[idx]
        loss, _ = softmax_cross_entropy(logits, one_hot(labels, ds.num_classes))
        loss_sum += loss * len(idx)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return loss_sum / len(ds), correct / len(ds)


def final_test_evaluation(model: ModelGraph, prepared: PreparedData):
    return evaluate(model, prepared.test.open(), prepared.normalizer)


class Trainer:
    """Owns one model, its strategy and optimizer for the length of a run."""

    def __init__(self, cfg: ExperimentConfig, model: ModelGraph, rng: Rng):
        self.cfg = cfg
        self.model = model
        self.strategy = make_strategy(cfg.algorithm, model, rng.fork(), gamma=cfg.gamma, alpha=cfg.alpha)
        self.opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
        self.params = model.parameters()
        self.peak_bytes = 0
        self.peak_segments = 0
        self.steps = 0

    def _apply(self, k: int, grads: dict) -> None:
        adam_update(self.opt, self.params, grads, where=lambda key: f"segment {self.model.param_segment(key)}")
        if self.cfg.clip_latent:
            for key in grads:
                node = self.model.nodes[int(key.split(".", 1)[0])]
                if node.binarize_weights and key.endswith(".W"):
                    np.clip(self.params[key], -1, 1, out=self.params[key])

    def step(self, x: np.ndarray, targets: np.ndarray):
        begin_step(self.opt)
        result = self.strategy.step(self.model, x, targets, on_grads=self._apply)
        self.steps += 1
        self.peak_bytes = max(self.peak_bytes, result.peak_bytes)
        self.peak_segments = max(self.peak_segments, result.peak_segments)
        return result


def run_experiment(cfg: ExperimentConfig, progress: bool = False) -> tuple[RunRecord, ModelGraph]:
    """Train and evaluate one configuration. Returns the record and the trained model."""
    t0 = time.perf_counter()
    root = Rng(cfg.seed)
    init_rng, fb_rng, split_rng, order_rng, aug_rng = (root.fork() for _ in range(5))
    prepared = prepare_data(cfg, split_rng)
    train, val, norm = prepared.train, prepared.val, prepared.normalizer
    model = build_model(arch_spec(cfg, train.image_shape, train.num_classes), init_rng)
    trainer = Trainer(cfg, model, fb_rng)
    aug = cfg.augment_config()
    record = RunRecord(config=cfg.to_dict(), seed=cfg.seed, normalization=norm.to_dict())

    try:
        for epoch in range(cfg.epochs):
            loss_sum, correct = 0.0, 0
            for idx in D.iterate_batches(len(train), cfg.batch_size, order_rng):
                images = D.augment(train.images[idx], aug, aug_rng)
                labels = train.labels[idx]
                res = trainer.step(norm(images), one_hot(labels, train.num_classes))
                loss_sum += res.loss * len(idx)
                correct += int((res.logits.argmax(axis=1) == labels).sum())
            val_loss, val_acc = evaluate(model, val, norm)
            record.epochs.append({"epoch": epoch + 1, "train_loss": loss_sum / len(train),
                                  "train_accuracy": correct / len(train), "val_loss": val_loss,
                                  "val_accuracy": val_acc})
            if progress:
                log.info("epoch %d: train %.4f / val %.4f", epoch + 1, correct / len(train), val_acc)
    except NonFiniteError as exc:
        record.failed = f"diverged at step {trainer.steps + 1}: {exc}"
        log.warning("run failed: %s", record.failed)

    if record.failed is None:
        record.test_loss, record.test_accuracy = final_test_evaluation(model, prepared)
    record.peak_activation_bytes = trainer.peak_bytes
    record.peak_segments = trainer.peak_segments
    record.seconds = time.perf_counter() - t0
    return record, model


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def default_grid(algorithm: str) -> dict[str, tuple]:
    """Learning rate plus the algorithm-specific hyperparameter, if any."""
    grid: dict[str, tuple] = {"lr": LEARNING_RATES}
    algo = Algo(algorithm)
    if algo is Algo.HSIC:
        grid["gamma"] = HSIC_GAMMAS
    elif algo is Algo.SIGPROP:
        grid["alpha"] = SIGPROP_ALPHAS
    return grid


def grid_points(base: ExperimentConfig, grid: dict[str, tuple]) -> list[ExperimentConfig]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid search needs a non-empty value list for every key")
    keys = list(grid)
    return [base.replace(**dict(zip(keys, combo))) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class GridResult:
    best: ExperimentConfig
    search_runs: list[RunRecord]
    final_runs: list[RunRecord]

    @property
    def test_accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.final_runs if r.test_accuracy is not None]


def select_best(points: list[ExperimentConfig], records: list[RunRecord], grid: dict[str, tuple]) -> ExperimentConfig:
    """Highest validation accuracy; ties go to the smaller learning rate, then earlier grid values."""
    other = [k for k in grid if k != "lr"]

    def key(i):
        cfg, rec = points[i], records[i]
        return (-rec.best_val_accuracy, cfg.lr, tuple(list(grid[k]).index(getattr(cfg, k)) for k in other))

    ok = [i for i, r in enumerate(records) if r.failed is None and not math.isnan(r.best_val_accuracy)]
    if not ok:
        raise RuntimeError("every grid-search run failed")
    return points[min(ok, key=key)]


def grid_search(base: ExperimentConfig, grid: dict[str, tuple] | None = None, repeats: int = 5,
                grid_epochs: int | None = None, runner=None) -> GridResult:
    """Search ``grid`` on one seed, then re-run the winner with ``repeats`` seeds.

    Repetition seeds are ``base.seed + 0 .. repeats - 1``. ``grid_epochs``
    shortens the search runs only. ``runner`` replaces :func:`run_experiment`
    (it must return a RunRecord), mainly for tests.
    """
    grid = grid or default_grid(base.algorithm)
    run = runner or (lambda c: run_experiment(c)[0])
    search_base = base if grid_epochs is None else base.replace(epochs=grid_epochs)
    points = grid_points(search_base, grid)
    records = [run(p) for p in points]
    best = select_best(points, records, grid).replace(epochs=base.epochs)
    finals = [run(best.replace(seed=base.seed + r)) for r in range(repeats)]
    return GridResult(best, records, finals)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CELL_KEYS = ("dataset", "arch", "algorithm", "binarize_weights", "binary_activations", "skip_connections")


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def format_mean_std(values_pct: list[float]) -> str:
    m, s = mean_std(values_pct)
    return f"{m:.1f} ({s:.2f})"


def summarize(records: list[RunRecord], timing: bool = False) -> list[dict]:
    cells: dict[tuple, list[RunRecord]] = {}
    for r in records:
        cells.setdefault(tuple(r.config[k] for k in CELL_KEYS), []).append(r)
    rows = []
    for key, recs in cells.items():
        accs = [100.0 * r.test_accuracy for r in recs if r.test_accuracy is not None]
        row = dict(zip(CELL_KEYS, key))
        row["runs"] = len(recs)
        row["failed"] = sum(r.failed is not None for r in recs)
        row["accuracy"] = format_mean_std(accs) if accs else "n/a"
        row["accuracy_mean"] = round(mean_std(accs)[0], 6) if accs else None
        row["accuracy_std"] = round(mean_std(accs)[1], 6) if accs else None
        row["peak_activation_bytes"] = int(max(r.peak_activation_bytes for r in recs))
        if timing:
            row["seconds"] = format_mean_std([r.seconds for r in recs])
        rows.append(row)
    return rows


def report(records: list[RunRecord], fmt: str = "table", timing: bool = False) -> bytes:
    """Render one row per (dataset, model, algorithm, binarization) cell.

    Accuracies are percentages, ``mean (population std)``. Wall-clock time
    is only included with ``timing=True`` since it is the one field that is
    not reproducible run to run.
    """
    if not records:
        raise ValueError("report needs at least one record")
    rows = summarize(records, timing)
    columns = list(rows[0])
    if fmt == "json":
        return (json.dumps(rows, indent=2, sort_keys=False) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\r\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue().encode()
    if fmt == "table":
        shown = [c for c in columns if c not in ("accuracy_mean", "accuracy_std")]
        cells = [[str(r[c]) for c in shown] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(shown)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(shown, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
        return ("\n".join(lines) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")
