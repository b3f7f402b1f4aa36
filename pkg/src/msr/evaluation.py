"""Frozen-encoder evaluation: linear and kNN probes, and the experiment grid."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .augment import AugSpec, draw_weak, sample_rng, weak_batch
from .autodiff import Tensor
from .data import Dataset, batches
from .trainer import TrainConfig, pretrain, worker_count


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr0: float = 30.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple[int, ...] = (60, 80)
    decay: float = 0.1
    batch_size: int = 256
    seed: int = 0
    # weak-augmented copies of the training split; epoch e trains on copy e mod n
    augment_copies: int = 0
    standardize: bool = True

    def validate(self) -> "ProbeConfig":
        if self.epochs < 1:
            raise ValueError("probe epochs must be positive")
        if any(m >= self.epochs or m < 1 for m in self.milestones):
            raise ValueError(f"decay epochs {self.milestones} must lie in [1, {self.epochs})")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("decay epochs must be increasing")
        if self.lr0 <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid probe optimizer settings")
        if self.batch_size < 1 or self.augment_copies < 0:
            raise ValueError("invalid probe batch size or augmentation copies")
        return self


def probe_lr(epoch: int, cfg: ProbeConfig) -> float:
    """Step schedule, evaluated in decimal so 30 -> 3 -> 0.3 come out as those literals."""
    drops = sum(1 for m in cfg.milestones if epoch >= m)
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.decay)) ** drops)


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    lr_trajectory: list[float]
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)


def _frozen_encoder(params: nn.ModelParams) -> nn.ModelParams:
    # private grad-free copy: probing can never write to the caller's arrays
    return params.subset((nn.ENCODER,), requires_grad=False)


def extract_features(params: nn.ModelParams, images: np.ndarray, chunk: int = 500) -> np.ndarray:
    """Eval-mode encoder features for [N, H, W, 3] images, float64."""
    enc = _frozen_encoder(params)
    dtype = next(iter(enc.params.values())).dtype
    out = []
    with ad.fresh_tape():
        for i in range(0, len(images), chunk):
            x = Tensor(np.ascontiguousarray(images[i : i + chunk].transpose(0, 3, 1, 2), dtype=dtype))
            out.append(nn.features(enc, x).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, params.arch.feature_dim))


def _check_splits(train: Dataset, test: Dataset) -> None:
    if len(train) == 0 or len(test) == 0:
        raise ValueError("probe splits must be nonempty")
    if train.class_count != test.class_count:
        raise ValueError(f"class mismatch: train has {train.class_count} classes, test {test.class_count}")


def init_classifier(dim: int, class_count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Starting point of every probe: W ~ N(0, 0.01^2), b = 0."""
    rng = np.random.default_rng([seed, 17])
    return rng.normal(0.0, 0.01, size=(dim, class_count)), np.zeros(class_count)


def fit_linear(train_x: np.ndarray, train_y: np.ndarray, class_count: int, cfg: ProbeConfig,
               train_views: Sequence[np.ndarray] = ()) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Softmax regression by SGD with momentum on fixed features."""
    cfg.validate()
    W0, b0 = init_classifier(train_x.shape[1], class_count, cfg.seed)
    W, b = Tensor(W0, requires_grad=True), Tensor(b0, requires_grad=True)
    rng = np.random.default_rng([cfg.seed, 18])
    mom = [np.zeros_like(W.data), np.zeros_like(b.data)]
    onehot = np.eye(class_count)[train_y]
    lrs = []
    n = len(train_y)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        lr = probe_lr(epoch, cfg)
        lrs.append(lr)
        feats = train_views[epoch % len(train_views)] if train_views else train_x
        for idx in batches(n, bs, int(rng.integers(2**62))):
            with ad.fresh_tape():
                logits = Tensor(feats[idx]) @ W + b
                nll = ad.logsumexp(logits, axis=1) - ad.sum(logits * Tensor(onehot[idx]), axis=1)
                grads = ad.backward(ad.mean(nll))
            for i, p in enumerate((W, b)):
                g = grads[p.id] + cfg.weight_decay * p.data
                mom[i] = cfg.momentum * mom[i] + g
                p.data = p.data - lr * mom[i]
    return W.data, b.data, lrs


def accuracy(x: np.ndarray, y: np.ndarray, W: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.argmax(x @ W + b, axis=1) == y))


def _standardizer(x: np.ndarray):
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    return lambda a: (a - mu) / sd


def linear_probe(params: nn.ModelParams, train: Dataset, test: Dataset,
                 cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Top-1 test accuracy of a linear classifier trained on frozen eval-mode features."""
    _check_splits(train, test)
    cfg.validate()
    tr, te = extract_features(params, train.images), extract_features(params, test.images)
    views = []
    if cfg.augment_copies:
        spec = AugSpec(out_size=train.images.shape[1])
        H, W = train.images.shape[1:3]
        for c in range(cfg.augment_copies):
            p = [draw_weak(sample_rng(cfg.seed, i, 100 + c), spec, H, W) for i in range(len(train))]
            views.append(extract_features(params, weak_batch(train.images, p, spec.out_size).astype(np.float32)))
    fix = _standardizer(tr) if cfg.standardize else (lambda a: a)
    Wt, bt, lrs = fit_linear(fix(tr), train.labels, train.class_count, cfg, [fix(v) for v in views])
    return ProbeResult(accuracy(fix(te), test.labels, Wt, bt), accuracy(fix(tr), train.labels, Wt, bt),
                       lrs, Wt, bt)


def knn_classify(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int,
                 class_count: int) -> np.ndarray:
    """Unweighted majority vote of the k most cosine-similar training points.

    Ties between classes go to the lowest class id.
    """
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("kNN splits must be nonempty")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k must lie in [1, {len(train_x)}], got {k}")

    def unit(a):
        norm = np.linalg.norm(a, axis=1, keepdims=True)
        return a / np.where(norm > 0, norm, 1.0)

    sim = unit(test_x) @ unit(train_x).T
    # stable sort on -sim keeps the earlier training index first among equal similarities
    nearest = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(test_x), class_count), dtype=np.int64)
    np.add.at(votes, (np.arange(len(test_x))[:, None], train_y[nearest]), 1)
    return np.argmax(votes, axis=1)


def knn_probe(params: nn.ModelParams, train: Dataset, test: Dataset, k: int = 20) -> float:
    _check_splits(train, test)
    tr, te = extract_features(params, train.images), extract_features(params, test.images)
    pred = knn_classify(tr, train.labels, te, k, train.class_count)
    return float(np.mean(pred == test.labels))


# ---------------------------------------------------------------------------
# Experiment grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    mode: str
    beta_schedule: str
    beta_base: float

    @property
    def label(self) -> str:
        if self.mode == "byol_aa":
            return "BYOL AA"
        if self.mode == "byol_aw":
            return "BYOL AW"
        name = "MSR MA" if self.mode == "msr" else "SimSiam+MSR"
        return f"{name} {'decay' if self.beta_schedule == 'cosine' else 'fixed'} b={self.beta_base:g}"


@dataclass
class ExperimentGrid:
    cells: list[Cell]
    seeds: tuple[int, ...]
    base: TrainConfig
    probe: ProbeConfig = ProbeConfig()

    def __post_init__(self):
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("grid cells must be unique")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("grid seeds must be unique and nonempty")

    def config(self, cell: Cell, seed: int) -> TrainConfig:
        return replace(self.base, mode=cell.mode, beta_schedule=cell.beta_schedule,
                       beta_base=cell.beta_base, seed=seed).resolved()


def table1_grid(base: TrainConfig, seeds=(0, 1, 2), beta_base: float = 0.5,
                probe: ProbeConfig = ProbeConfig()) -> ExperimentGrid:
    cells = [Cell("byol_aa", "fixed", 0.0), Cell("byol_aw", "fixed", 0.0),
             Cell("msr", "fixed", beta_base), Cell("msr", "cosine", beta_base)]
    return ExperimentGrid(cells, tuple(seeds), base, probe)


def beta_sweep_grid(base: TrainConfig, seeds=(0, 1, 2), values=None,
                    probe: ProbeConfig = ProbeConfig()) -> ExperimentGrid:
    values = [round(0.1 * i, 1) for i in range(8)] if values is None else values
    return ExperimentGrid([Cell("msr", "cosine", float(v)) for v in values], tuple(seeds), base, probe)


@dataclass
class CellResult:
    cell: Cell
    seed: int
    accuracy: float | None
    error: str | None = None


@dataclass
class GridReport:
    results: list[CellResult]

    def summary(self) -> list[tuple[Cell, float, float, int, int]]:
        """Per cell: (cell, mean, population std, successful runs, failed runs)."""
        order: list[Cell] = []
        for r in self.results:
            if r.cell not in order:
                order.append(r.cell)
        out = []
        for c in order:
            accs = [r.accuracy for r in self.results if r.cell == c and r.accuracy is not None]
            failed = sum(1 for r in self.results if r.cell == c and r.accuracy is None)
            mean = float(np.mean(accs)) if accs else math.nan
            std = float(np.std(accs)) if accs else math.nan
            out.append((c, mean, std, len(accs), failed))
        return out

    def mean(self, cell: Cell) -> float:
        return next(m for c, m, *_ in self.summary() if c == cell)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "beta_schedule", "beta_base", "seed", "accuracy"])
        for r in self.results:
            acc = "failed" if r.accuracy is None else repr(r.accuracy)
            w.writerow([r.cell.mode, r.cell.beta_schedule, repr(r.cell.beta_base), r.seed, acc])
        return buf.getvalue()

    def to_text(self) -> str:
        rows = [("method", "beta", "accuracy (%)", "runs")]
        for c, m, s, n, failed in self.summary():
            beta = "--" if c.mode.startswith("byol") else ("decay" if c.beta_schedule == "cosine" else "fixed")
            acc = "failed" if n == 0 else f"{100 * m:.1f} +/- {100 * s:.1f}"
            rows.append((c.label, beta, acc, f"{n}" + (f" ({failed} failed)" if failed else "")))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


_GRID_CTX: dict = {}


def run_cell(grid: ExperimentGrid, cell: Cell, seed: int, train: Dataset, test: Dataset) -> CellResult:
    try:
        state = pretrain(grid.config(cell, seed), train)
        acc = linear_probe(state.pair.online, train, test, replace(grid.probe, seed=seed)).accuracy
        return CellResult(cell, seed, acc)
    except Exception as e:  # a failed cell is reported, not fatal
        return CellResult(cell, seed, None, f"{type(e).__name__}: {e}")


def _run_job(job):
    grid, cell, seed = job
    return run_cell(grid, cell, seed, _GRID_CTX["train"], _GRID_CTX["test"])


def run_grid(grid: ExperimentGrid, train: Dataset, test: Dataset, workers: int | None = None) -> GridReport:
    """Every (cell, seed) pair; fans out over ``MSR_THREADS`` processes when above 1."""
    jobs = [(grid, c, s) for c in grid.cells for s in grid.seeds]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        return GridReport([run_cell(grid, c, s, train, test) for _, c, s in jobs])
    _GRID_CTX.update(train=train, test=test)
    try:
        import multiprocessing as mp
        with ProcessPoolExecutor(min(workers, len(jobs)), mp_context=mp.get_context("fork")) as ex:
            return GridReport(list(ex.map(_run_job, jobs)))
    finally:
        _GRID_CTX.clear()


def write_report(report: GridReport, out_dir: str | os.PathLike) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "grid.csv"), "w") as f:
        f.write(report.to_csv())
    with open(os.path.join(out_dir, "grid.txt"), "w") as f:
        f.write(report.to_text())
