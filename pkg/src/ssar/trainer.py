"""Experiment harness: chronological splits, random search, multi-sample training, test MSE.

Seeds: every random draw comes from
``np.random.SeedSequence(master_seed, spawn_key=(crc32(method), w_s, phase, index, stream))``
with ``phase`` 0 for search trials and 1 for final samples, and ``stream`` 0 for the
hyperparameter draw, 1 for training. Any single cell (or trial) can be rerun alone.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, tgcn
from .checkpoint import ParamSet
from .dataproc import NormStats, SplitRatios, TimeSeriesFrame, normalize, process
from .depmeasures import MIN_WINDOW, MeasureKind, MeasureSpec
from .graph import CONSTANT_KIND, AblationConfig, TemporalGraph, build_constant, build_temporal

logger = logging.getLogger(__name__)

BASELINE_KINDS = tuple(k.value for k in baselines.LinearKind)
_TRIAL_ERRORS = (ArithmeticError, ValueError, IndexError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class GridSpace:
    M: tuple[int, ...] = tuple(range(8, 31))
    Q: tuple[int, ...] = tuple(range(8, 121, 8))
    lr: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    epochs: tuple[int, ...] = tuple(range(2, 31))
    K: tuple[int, ...] = tuple(range(1, 7))

    def __post_init__(self):
        for name in ("M", "Q", "lr", "epochs", "K"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"search space for {name} is empty")
            object.__setattr__(self, name, values)

    @classmethod
    def baseline_default(cls) -> "GridSpace":
        return cls(Q=tuple(range(8, 129, 8)), epochs=tuple(range(5, 31, 5)))

    @classmethod
    def from_dict(cls, d: dict, base: "GridSpace | None" = None) -> "GridSpace":
        base = base or cls()
        extra = set(d) - {"M", "Q", "lr", "epochs", "K"}
        if extra:
            raise ValueError(f"unknown search-space keys {sorted(extra)}")
        return replace(base, **{k: tuple(v) for k, v in d.items()})

    def sample(self, rng: np.random.Generator, method: str, batch_size: int) -> tgcn.HyperParams:
        pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
        M, Q, lr, epochs, K = pick(self.M), pick(self.Q), pick(self.lr), pick(self.epochs), pick(self.K)
        if method not in (CONSTANT_KIND, *BASELINE_KINDS) and not MeasureKind.parse(method).linear:
            K = 1
        return tgcn.HyperParams(M=M, Q=Q, K=K, lr=lr, epochs=epochs, batch_size=batch_size)

    def size(self, method: str) -> int:
        if method in BASELINE_KINDS:
            return len(self.lr) * len(self.epochs)
        k = len(self.K) if method == CONSTANT_KIND or MeasureKind.parse(method).linear else 1
        return len(self.M) * len(self.Q) * len(self.lr) * len(self.epochs) * k

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("M", "Q", "lr", "epochs", "K")}


@dataclass(frozen=True)
class ExperimentConfig:
    measures: tuple[str, ...] = tuple(k.value for k in MeasureKind)
    windows: tuple[int, ...] = (20, 30, 40, 50, 60, 70, 80)
    ratios: SplitRatios = SplitRatios(0.6, 0.2, 0.2)
    trials: int = 260
    test_samples: int = 5
    seed: int = 0
    baselines: tuple[str, ...] = BASELINE_KINDS
    ablation: bool = True
    ablation_constant: float = 1.0
    batch_size: int = 32
    bins: int | None = None
    gcn_space: GridSpace = GridSpace()
    baseline_space: GridSpace = GridSpace.baseline_default()
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "measures", tuple(MeasureKind.parse(m).value for m in self.measures))
        object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))
        object.__setattr__(self, "baselines", tuple(baselines.LinearKind(b).value for b in self.baselines))
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if self.test_samples < 1:
            raise ValueError("test sample count must be >= 1")
        if not self.windows or min(self.windows) < MIN_WINDOW:
            raise ValueError(f"window sizes must be >= {MIN_WINDOW}, got {self.windows}")
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch_size and workers must be >= 1")
        if self.ablation:
            AblationConfig(self.ablation_constant)

    def methods(self) -> tuple[str, ...]:
        return self.measures + ((CONSTANT_KIND,) if self.ablation else ()) + self.baselines

    def to_dict(self) -> dict:
        return {
            "measures": list(self.measures),
            "windows": list(self.windows),
            "ratios": [self.ratios.train, self.ratios.validation, self.ratios.test],
            "trials": self.trials,
            "test_samples": self.test_samples,
            "seed": self.seed,
            "baselines": list(self.baselines),
            "ablation": self.ablation,
            "ablation_constant": self.ablation_constant,
            "batch_size": self.batch_size,
            "bins": self.bins,
            "gcn_space": self.gcn_space.to_dict(),
            "baseline_space": self.baseline_space.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("workers", None)  # runtime setting, never part of the result
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown experiment config keys {sorted(extra)}")
        if "ratios" in d:
            d["ratios"] = SplitRatios(*d["ratios"])
        if "gcn_space" in d:
            d["gcn_space"] = GridSpace.from_dict(d["gcn_space"])
        if "baseline_space" in d:
            d["baseline_space"] = GridSpace.from_dict(d["baseline_space"], GridSpace.baseline_default())
        for key in ("measures", "windows", "baselines"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainReport:
    method: str
    window: int
    hp: dict | None = None
    validation_mse: float | None = None
    test_mses: list[float] = field(default_factory=list)
    epoch_losses: list[list[float]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    trials_failed: int = 0
    error: str | None = None

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.test_mses)) if self.test_mses else None

    @property
    def std(self) -> float | None:
        if not self.test_mses:
            return None
        return float(np.std(self.test_mses, ddof=1)) if len(self.test_mses) > 1 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = self.mean
        d["std"] = self.std
        return d


# --- seeds -------------------------------------------------------------------------------


def derive_seed(master: int, method: str, window: int, phase: int, index: int, stream: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(zlib.crc32(method.encode()), window, phase, index, stream))
    return int(ss.generate_state(1, np.uint64)[0])


# --- per-cell data -----------------------------------------------------------------------


@dataclass
class CellData:
    """Everything one (method, w_s) cell trains and evaluates on.

    Positions are snapshot indices ``k``; sample ``k`` forecasts frame row ``w_s + k``.
    """

    method: str
    window: int
    counts: tuple[int, int, int]
    stats: NormStats
    targets: np.ndarray  # [n, N]
    graph: TemporalGraph | None = None
    flat: np.ndarray | None = None  # [n, w_s, N]
    _snap: dict = field(default_factory=dict, repr=False)

    @property
    def is_baseline(self) -> bool:
        return self.graph is None

    def snapshots(self, K: int) -> tgcn.SnapshotData:
        if K not in self._snap:
            self._snap[K] = tgcn.SnapshotData.from_graph(self.graph, self.targets, K)
        return self._snap[K]

    def ends(self, segment: str, M: int = 1) -> np.ndarray:
        n_tr, n_va, n_te = self.counts
        lo = M - 1 if not self.is_baseline else 0
        if segment == "train":
            return np.arange(lo, n_tr)
        if segment == "validation":
            return np.arange(max(lo, n_tr), n_tr + n_va)
        if segment == "train+validation":
            return np.arange(lo, n_tr + n_va)
        if segment == "test":
            return np.arange(max(lo, n_tr + n_va), n_tr + n_va + n_te)
        raise ValueError(f"unknown segment {segment!r}")


def prepare_input(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Apply the change transforms if the frame still holds levels."""
    return process(frame) if frame.schema is not None else frame


def prepare_cell(cfg: ExperimentConfig, frame: TimeSeriesFrame, method: str, window: int,
                 workers: int = 1) -> CellData:
    frame = prepare_input(frame)
    n = frame.T - window
    if n < 3:
        raise ValueError(f"frame with {frame.T} rows leaves {n} samples for window {window}")
    counts = cfg.ratios.counts(n)
    # statistics only ever see rows up to the last training target
    stats = NormStats.fit(frame.rows(0, window + counts[0]))
    normed = normalize(frame, stats)
    targets = np.array(normed.values[window:])
    cell = CellData(method, window, counts, stats, targets)
    if method in BASELINE_KINDS:
        view = np.lib.stride_tricks.sliding_window_view(normed.values, window, axis=0)  # [T-w+1, N, w]
        cell.flat = np.ascontiguousarray(view[:n].transpose(0, 2, 1))
    elif method == CONSTANT_KIND:
        cell.graph = build_constant(normed, window, AblationConfig(cfg.ablation_constant))
    else:
        spec = MeasureSpec(method, window, bins=cfg.bins)
        cell.graph = build_temporal(normed, spec, workers=workers)
    return cell


# --- training / evaluation ---------------------------------------------------------------


@dataclass
class TrainedModel:
    """A fitted graph model or linear baseline plus its provenance."""

    method: str
    window: int
    hp: tgcn.HyperParams
    fit: tgcn.FitResult
    seed: int
    linear: baselines.LinearModel | None = None

    @property
    def params(self) -> ParamSet:
        return self.linear.params if self.linear is not None else self.fit.params


def train_one(cell: CellData, hp: tgcn.HyperParams, ends: np.ndarray, seed: int) -> TrainedModel:
    if ends.size == 0:
        raise ValueError(f"no training samples for M={hp.M}")
    if cell.is_baseline:
        model, res = baselines.fit(cell.method, cell.flat[ends], cell.targets[ends], hp, seed)
        return TrainedModel(cell.method, cell.window, hp, res, seed, model)
    res = tgcn.fit(cell.snapshots(hp.K), ends, hp, seed, kind=cell.method)
    return TrainedModel(cell.method, cell.window, hp, res, seed)


def predict(cell: CellData, model: TrainedModel, ends: np.ndarray) -> np.ndarray:
    if model.linear is not None:
        return model.linear.predict_batch(cell.flat[ends])
    return tgcn.predict_samples(model.fit.params, cell.snapshots(model.hp.K), ends, model.hp.M)


def segment_mse(cell: CellData, model: TrainedModel, segment: str) -> float:
    ends = cell.ends(segment, model.hp.M)
    if ends.size == 0:
        raise ValueError(f"{segment} segment has no (window, target) pairs")
    pred = predict(cell, model, ends)
    mse = float(np.mean((pred - cell.targets[ends]) ** 2))
    if not math.isfinite(mse):
        raise FloatingPointError(f"non-finite {segment} MSE")
    return mse


def evaluate(models: Sequence[TrainedModel], cell: CellData) -> list[float]:
    """One-step-ahead test MSE per model; inference only."""
    return [segment_mse(cell, m, "test") for m in models]


def _space(cfg: ExperimentConfig, method: str) -> GridSpace:
    return cfg.baseline_space if method in BASELINE_KINDS else cfg.gcn_space


def _run_trial(cell: CellData, cfg: ExperimentConfig, index: int):
    rng = np.random.default_rng(derive_seed(cfg.seed, cell.method, cell.window, 0, index, 0))
    hp = _space(cfg, cell.method).sample(rng, cell.method, cfg.batch_size)
    try:
        model = train_one(cell, hp, cell.ends("train", hp.M),
                          derive_seed(cfg.seed, cell.method, cell.window, 0, index, 1))
        return hp, segment_mse(cell, model, "validation"), None
    except _TRIAL_ERRORS as exc:
        return hp, None, f"{type(exc).__name__}: {exc}"


def _map(fn, args: list, workers: int) -> list:
    """Ordered results; sequential when ``workers == 1``."""
    if workers <= 1 or len(args) < 2:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args)))


def random_grid_search(cell: CellData, cfg: ExperimentConfig, n_trials: int | None = None,
                       workers: int = 1) -> tuple[tgcn.HyperParams, float, int]:
    """Best hyperparameters by validation MSE (earliest trial wins ties), value, #failed trials."""
    n_trials = cfg.trials if n_trials is None else n_trials
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    results = _map(_run_trial, [(cell, cfg, i) for i in range(n_trials)], workers)
    best, best_mse, failed = None, math.inf, 0
    for i, (hp, mse, err) in enumerate(results):
        if err is not None:
            failed += 1
            logger.info("%s w_s=%d trial %d skipped: %s", cell.method, cell.window, i, err)
            continue
        if mse < best_mse:
            best, best_mse = hp, mse
    if best is None:
        raise RuntimeError(f"all {n_trials} search trials failed for {cell.method} w_s={cell.window}")
    return best, best_mse, failed


def _final_one(cell: CellData, hp: tgcn.HyperParams, seed: int) -> TrainedModel:
    return train_one(cell, hp, cell.ends("train+validation", hp.M), seed)


def final_train(cell: CellData, hp: tgcn.HyperParams, n_samples: int, master_seed: int,
                workers: int = 1) -> list[TrainedModel]:
    """Independent models on train+validation, one derived seed per sample."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seeds = [derive_seed(master_seed, cell.method, cell.window, 1, i, 1) for i in range(n_samples)]
    return _map(_final_one, [(cell, hp, s) for s in seeds], workers)


def _hp_dict(method: str, hp: tgcn.HyperParams) -> dict:
    d = hp.to_dict()
    if method in BASELINE_KINDS:
        return {k: d[k] for k in ("lr", "epochs", "batch_size")}
    return d


def run_cell(cfg: ExperimentConfig, frame: TimeSeriesFrame, method: str, window: int,
             workers: int = 1) -> tuple[TrainReport, list[TrainedModel], CellData | None]:
    report = TrainReport(method, window)
    try:
        cell = prepare_cell(cfg, frame, method, window, workers)
        hp, val, failed = random_grid_search(cell, cfg, workers=workers)
        models = final_train(cell, hp, cfg.test_samples, cfg.seed, workers)
        report.hp = _hp_dict(method, hp)
        report.validation_mse = val
        report.trials_failed = failed
        report.test_mses = evaluate(models, cell)
        report.epoch_losses = [list(m.fit.epoch_losses) for m in models]
        report.seeds = [m.seed for m in models]
        return report, models, cell
    except (RuntimeError, *_TRIAL_ERRORS) as exc:
        report.error = f"{type(exc).__name__}: {exc}"
        logger.error("cell %s w_s=%d failed: %s", method, window, report.error)
        return report, [], None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[TrainReport]
    models: dict = field(default_factory=dict, repr=False)  # (method, w_s) -> [TrainedModel]
    cells: dict = field(default_factory=dict, repr=False)

    def cell(self, method: str, window: int) -> TrainReport:
        for r in self.reports:
            if r.method == method and r.window == window:
                return r
        raise KeyError((method, window))

    def to_json(self) -> str:
        doc = {"config": self.config.to_dict(), "cells": [r.to_dict() for r in self.reports]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def summary_csv(self) -> str:
        """Rows: w_s; columns: methods; cells ``mean±std`` of test MSE."""
        methods = self.config.methods()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["w_s", *methods])
        for window in self.config.windows:
            row = [window]
            for m in methods:
                r = self.cell(m, window)
                row.append("error" if r.mean is None else f"{r.mean:.6g}±{r.std:.6g}")
            w.writerow(row)
        return buf.getvalue()

    def quartiles_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "w_s", "n", "min", "q1", "median", "q3", "max"])
        for r in self.reports:
            if not r.test_mses:
                continue
            q = np.percentile(r.test_mses, [0, 25, 50, 75, 100])
            w.writerow([r.method, r.window, len(r.test_mses), *(f"{v:.10g}" for v in q)])
        return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, frame: TimeSeriesFrame, workers: int | None = None,
                   keep_models: bool = False) -> ExperimentResult:
    """Every (method, w_s) cell under shared splits and seeds; failures stay in their cell."""
    workers = cfg.workers if workers is None else workers
    result = ExperimentResult(cfg, [])
    for window in cfg.windows:
        for method in cfg.methods():
            report, models, cell = run_cell(cfg, frame, method, window, workers)
            result.reports.append(report)
            if keep_models:
                result.models[(method, window)] = models
                result.cells[(method, window)] = cell
    return result


def write_outputs(result: ExperimentResult, out_dir: str | Path, prefix: str = "report") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        f"{prefix}.json": result.to_json(),
        f"{prefix}_summary.csv": result.summary_csv(),
        f"{prefix}_quartiles.csv": result.quartiles_csv(),
    }
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths
