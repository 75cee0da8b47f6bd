"""Panel ingestion, change transforms, standardization and chronological splits."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input panels or invalid transforms."""


class TransformKind(enum.Enum):
    MARKET = "log_return"
    LEVEL = "diff"
    LEVEL_WITH_GAPS = "diff_ffill"

    @classmethod
    def parse(cls, name: str) -> "TransformKind":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise DataError(f"unknown transform kind {name!r}; expected one of {valid}") from None


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Aligned T x N panel. Missing cells are NaN.

    ``schema`` is ``None`` for frames that are already in change space
    (synthetic draws, or output of :func:`process`).
    """

    timestamps: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray
    schema: Mapping[str, TransformKind] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        if values.shape != (len(self.timestamps), len(self.names)):
            raise DataError(
                f"values shape {values.shape} does not match "
                f"{len(self.timestamps)} timestamps x {len(self.names)} names"
            )
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate feature names")
        if self.schema is not None:
            missing = [n for n in self.names if n not in self.schema]
            if missing:
                raise DataError(f"schema has no transform kind for {missing}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())

    def rows(self, start: int, stop: int) -> "TimeSeriesFrame":
        return TimeSeriesFrame(
            self.timestamps[start:stop], self.names, self.values[start:stop], self.schema, dict(self.meta)
        )

    def with_values(self, values: np.ndarray, schema="keep") -> "TimeSeriesFrame":
        return TimeSeriesFrame(
            self.timestamps, self.names, values, self.schema if schema == "keep" else schema, dict(self.meta)
        )


def _timestamp_key(label: str):
    try:
        return (0, float(label))
    except ValueError:
        pass
    try:
        return (1, datetime.fromisoformat(label))
    except ValueError:
        raise DataError(f"unparsable timestamp {label!r}") from None


def check_timestamps(labels: Sequence[str]) -> None:
    keys = [_timestamp_key(s) for s in labels]
    if len({k[0] for k in keys}) > 1:
        raise DataError("timestamps mix numeric and date labels")
    for a, b, la, lb in zip(keys, keys[1:], labels, labels[1:]):
        if b[1] == a[1]:
            raise DataError(f"duplicate timestamp {lb!r}")
        if b[1] < a[1]:
            raise DataError(f"timestamps not increasing at {la!r} -> {lb!r}")


def load_schema(path: str | Path) -> dict[str, TransformKind]:
    """Read a feature -> transform-kind mapping from a JSON or YAML file."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        raw = yaml.safe_load(text)
    else:
        raw = json.loads(text)
    if not isinstance(raw, dict):
        raise DataError(f"schema file {path} must hold a mapping")
    return {str(k): TransformKind.parse(str(v)) for k, v in raw.items()}


def load_frame(path: str | Path, schema: Mapping[str, TransformKind] | None = None) -> TimeSeriesFrame:
    """Parse a ``date,<feature>...`` CSV. Empty cells become NaN (missing)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "date":
            raise DataError(f"{path}: first header column must be 'date'")
        names = [h.strip() for h in header[1:]]
        stamps, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            stamps.append(rec[0].strip())
            row = []
            for name, cell in zip(names, rec[1:]):
                cell = cell.strip()
                if cell == "":
                    row.append(math.nan)
                    continue
                try:
                    row.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {name!r}") from None
            rows.append(row)
    check_timestamps(stamps)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    if schema is not None:
        schema = {n: schema[n] for n in names if n in schema}
    return TimeSeriesFrame(tuple(stamps), tuple(names), values, schema)


def write_frame(frame: TimeSeriesFrame, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *frame.names])
        for stamp, row in zip(frame.timestamps, frame.values):
            w.writerow([stamp, *("" if np.isnan(v) else repr(float(v)) for v in row)])


def _transform_column(col: np.ndarray, kind: TransformKind, name: str) -> np.ndarray:
    present = ~np.isnan(col)
    if not present.any():
        raise DataError(f"feature {name!r} is entirely missing")
    if not present[0]:
        raise DataError(f"feature {name!r}: first observation is missing")
    if kind is TransformKind.MARKET and np.any(col[present] <= 0):
        raise DataError(f"market feature {name!r} has non-positive values; log return undefined")

    # value of the most recent observation strictly before i
    idx = np.where(present, np.arange(col.size), 0)
    last_seen = np.maximum.accumulate(idx)
    ref = col[last_seen[:-1]]
    cur = col[1:]
    if kind is TransformKind.MARKET:
        out = np.log(cur / ref)
    else:
        out = cur - ref
    out[~present[1:]] = 0.0
    return out


def process(raw: TimeSeriesFrame) -> TimeSeriesFrame:
    """Turn levels/prices into changes; drops the first row.

    Every kind differences against the most recent non-missing observation,
    so a plain ``diff`` feature with gaps behaves like ``diff_ffill``.
    Missing positions themselves become 0 (no change).
    """
    if raw.schema is None:
        raise DataError("process() needs a schema with one transform kind per feature")
    if raw.T < 2:
        raise DataError("need at least two rows to form changes")
    cols = [_transform_column(raw.values[:, j], raw.schema[n], n) for j, n in enumerate(raw.names)]
    return TimeSeriesFrame(raw.timestamps[1:], raw.names, np.column_stack(cols), None, dict(raw.meta))


@dataclass(frozen=True)
class NormStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frame: TimeSeriesFrame) -> "NormStats":
        if frame.has_missing():
            raise DataError("cannot fit normalization on a frame with missing values")
        mean = frame.values.mean(axis=0)
        std = frame.values.std(axis=0)
        flat = [n for n, s in zip(frame.names, std) if not s > 0]
        if flat:
            raise DataError(f"constant feature(s) {flat}: standard deviation is zero")
        return cls(frame.names, mean, std)

    def _check(self, frame: TimeSeriesFrame) -> None:
        if tuple(frame.names) != tuple(self.names):
            raise DataError(f"normalization stats fitted on {self.names}, frame has {frame.names}")

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}


def normalize(frame: TimeSeriesFrame, stats: NormStats) -> TimeSeriesFrame:
    stats._check(frame)
    return frame.with_values((frame.values - stats.mean) / stats.std)


def denormalize(frame: TimeSeriesFrame, stats: NormStats) -> TimeSeriesFrame:
    stats._check(frame)
    return frame.with_values(frame.values * stats.std + stats.mean)


@dataclass(frozen=True)
class SplitRatios:
    train: float
    validation: float
    test: float

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            r = getattr(self, name)
            if not 0.0 < r < 1.0:
                raise DataError(f"{name} ratio {r} must lie in (0, 1)")
        if abs(self.train + self.validation + self.test - 1.0) > 1e-12:
            raise DataError("split ratios must sum to 1")

    def counts(self, n: int) -> tuple[int, int, int]:
        """Segment lengths for ``n`` rows; the flooring remainder goes to train."""
        # guard against 0.35 * 100 landing on 34.999...
        n_val = int(math.floor(self.validation * n + 1e-9))
        n_test = int(math.floor(self.test * n + 1e-9))
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) < 1:
            raise DataError(f"{n} rows cannot be split into three non-empty segments with {self}")
        return n_train, n_val, n_test


def split(frame: TimeSeriesFrame, ratios: SplitRatios):
    if frame.T < 3:
        raise DataError("need at least three rows to split")
    n_train, n_val, _ = ratios.counts(frame.T)
    a, b = n_train, n_train + n_val
    return frame.rows(0, a), frame.rows(a, b), frame.rows(b, frame.T)
