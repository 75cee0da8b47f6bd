"""Temporal sequences of weighted directed graphs built from sliding windows.

Binary file layout (``ssar-graph v1``, little-endian)::

    magic        8 bytes   b"SSARGRPH"
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 JSON:
                 {version, N, nodes, w_s, measure, snapshot_count, first_t,
                  storage ("dense" | "list"), spec}
    snapshots    snapshot_count records:
                   index  i64     position in the sequence
                   t      i64     frame row the snapshot forecasts
                   signal f64[N]
                   dense: weights f64[N*N], row-major, entry (i, j) = weight of i -> j
                   list:  nnz u32, then nnz x (i u32, j u32, w f64)
    crc32        u32 over every preceding byte
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataproc import DataError, TimeSeriesFrame
from .depmeasures import MIN_WINDOW, DegenerateWindowError, MeasureKind, MeasureSpec, WelchConfig, raw_measure

logger = logging.getLogger(__name__)

MAGIC = b"SSARGRPH"
FORMAT_VERSION = 1
CONSTANT_KIND = "constant"


class GraphFormatError(ValueError):
    """Corrupt or truncated graph file."""


class GraphVersionError(GraphFormatError):
    """Graph file written by an unsupported format version."""


@dataclass(frozen=True)
class WeightedDiGraph:
    nodes: tuple[str, ...]
    weights: np.ndarray
    signal: np.ndarray
    t: int = -1

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        s = np.array(self.signal, dtype=np.float64)
        n = len(self.nodes)
        if w.shape != (n, n) or s.shape != (n,):
            raise ValueError(f"graph with {n} nodes got weights {w.shape} and signal {s.shape}")
        if np.any(np.diag(w) != 0.0):
            raise ValueError("graph must be irreflexive (zero diagonal)")
        if not np.isfinite(w).all() or np.any(w < 0):
            raise ValueError("edge weights must be finite and nonnegative")
        w.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "signal", s)

    @property
    def N(self) -> int:
        return len(self.nodes)

    def edges(self) -> list[tuple[str, str, float]]:
        """Nonzero edges as (source, target, weight)."""
        ii, jj = np.nonzero(self.weights)
        return [(self.nodes[i], self.nodes[j], float(self.weights[i, j])) for i, j in zip(ii, jj)]

    @property
    def edge_count(self) -> int:
        return int(np.count_nonzero(self.weights))

    def __eq__(self, other):
        if not isinstance(other, WeightedDiGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.t == other.t
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.signal, other.signal)
        )


@dataclass(frozen=True)
class TemporalGraph:
    snapshots: tuple[WeightedDiGraph, ...]
    first_t: int
    window: int
    kind: str
    spec: MeasureSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(self.snapshots))
        if not self.snapshots:
            raise ValueError("temporal graph needs at least one snapshot")
        nodes = self.snapshots[0].nodes
        for k, g in enumerate(self.snapshots):
            if g.nodes != nodes:
                raise ValueError(f"snapshot {k} has different nodes")
            if g.t != self.first_t + k:
                raise ValueError(f"snapshot {k} has t={g.t}, expected {self.first_t + k}")

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, k):
        return self.snapshots[k]

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.snapshots[0].nodes

    @property
    def N(self) -> int:
        return len(self.nodes)

    def weights_array(self) -> np.ndarray:
        return np.stack([g.weights for g in self.snapshots])

    def signals_array(self) -> np.ndarray:
        return np.stack([g.signal for g in self.snapshots])

    def slice(self, start: int, stop: int) -> "TemporalGraph":
        return TemporalGraph(self.snapshots[start:stop], self.first_t + start, self.window, self.kind, self.spec)


@dataclass(frozen=True)
class AblationConfig:
    constant: float = 1.0

    def __post_init__(self):
        if self.constant == 0 or not np.isfinite(self.constant):
            raise ValueError("ablation constant must be a finite nonzero real")


def _check_frame(frame: TimeSeriesFrame, window: int) -> None:
    if frame.has_missing():
        raise DataError("graph construction needs a frame without missing values")
    if frame.T <= window:
        raise DataError(f"frame has {frame.T} rows; need more than the window {window}")


def _snapshot_weights(block: np.ndarray, spec: MeasureSpec) -> tuple[np.ndarray, int]:
    n = block.shape[1]
    cols = [np.ascontiguousarray(block[:, j]) for j in range(n)]
    w = np.zeros((n, n))
    degenerate = 0
    symmetric = spec.kind.symmetric
    for i in range(n):
        for j in range(i + 1 if symmetric else 0, n):
            if i == j:
                continue
            try:
                value = abs(raw_measure(spec, cols[i], cols[j]))
            except DegenerateWindowError:
                degenerate += 1
                value = 0.0
            w[i, j] = value
            if symmetric:
                w[j, i] = value
    return w, degenerate


def build_snapshot(frame: TimeSeriesFrame, t: int, spec: MeasureSpec) -> WeightedDiGraph:
    """Graph for forecasting row ``t``: weights from rows [t - w_s, t - 1], signal = row t - 1."""
    if not spec.window <= t < frame.T:
        raise IndexError(f"t={t} outside [{spec.window}, {frame.T - 1}]")
    block = frame.values[t - spec.window : t]
    w, degenerate = _snapshot_weights(block, spec)
    if degenerate:
        logger.warning("t=%d: %d degenerate %s window(s), weights set to 0", t, degenerate, spec.kind.value)
    return WeightedDiGraph(frame.names, w, frame.values[t - 1], t)


def _build_range(frame: TimeSeriesFrame, spec: MeasureSpec, ts: Sequence[int]) -> list[WeightedDiGraph]:
    return [build_snapshot(frame, t, spec) for t in ts]


def build_temporal(frame: TimeSeriesFrame, spec: MeasureSpec, workers: int = 1) -> TemporalGraph:
    """One snapshot per t in [w_s, T - 1]; T - w_s snapshots in total."""
    _check_frame(frame, spec.window)
    ts = list(range(spec.window, frame.T))
    if workers <= 1 or len(ts) < 2 * workers:
        snaps = _build_range(frame, spec, ts)
    else:
        chunks = [c.tolist() for c in np.array_split(np.array(ts), workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_build_range, [frame] * len(chunks), [spec] * len(chunks), chunks)
            snaps = [g for part in parts for g in part]
    return TemporalGraph(tuple(snaps), spec.window, spec.window, spec.kind.value, spec)


def build_constant(frame: TimeSeriesFrame, window: int, cfg: AblationConfig) -> TemporalGraph:
    """Same loop bounds and signals as :func:`build_temporal`, every off-diagonal weight = c.

    Weights must stay nonnegative, so a negative c is applied via its magnitude.
    """
    if window < 1:
        raise ValueError("window must be positive")
    _check_frame(frame, window)
    n = frame.N
    w = np.full((n, n), abs(float(cfg.constant)))
    np.fill_diagonal(w, 0.0)
    snaps = tuple(WeightedDiGraph(frame.names, w, frame.values[t - 1], t) for t in range(window, frame.T))
    return TemporalGraph(snaps, window, window, CONSTANT_KIND, None)


# --- serialization ------------------------------------------------------------------


def _header(g: TemporalGraph, storage: str) -> dict:
    return {
        "version": FORMAT_VERSION,
        "N": g.N,
        "nodes": list(g.nodes),
        "w_s": g.window,
        "measure": g.kind,
        "snapshot_count": len(g),
        "first_t": g.first_t,
        "storage": storage,
        "spec": g.spec.to_dict() if g.spec is not None else None,
    }


def _spec_from_dict(d: dict | None) -> MeasureSpec | None:
    if d is None:
        return None
    window = int(d["window"])
    return MeasureSpec(
        MeasureKind.parse(d["kind"]),
        window,
        d.get("bins"),
        WelchConfig(**d["spectral"]),
        allow_small_window=window < MIN_WINDOW,
    )


def dumps(g: TemporalGraph, storage: str = "dense") -> bytes:
    if storage not in ("dense", "list"):
        raise ValueError("storage must be 'dense' or 'list'")
    header = json.dumps(_header(g, storage), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for k, snap in enumerate(g.snapshots):
        parts.append(struct.pack("<qq", k, snap.t))
        parts.append(snap.signal.astype("<f8").tobytes())
        if storage == "dense":
            parts.append(snap.weights.astype("<f8").tobytes())
        else:
            ii, jj = np.nonzero(snap.weights)
            rec = np.zeros(ii.size, dtype=[("i", "<u4"), ("j", "<u4"), ("w", "<f8")])
            rec["i"], rec["j"], rec["w"] = ii, jj, snap.weights[ii, jj]
            parts.append(struct.pack("<I", ii.size))
            parts.append(rec.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> TemporalGraph:
    if len(data) < 16 or data[:8] != MAGIC:
        raise GraphFormatError("not an ssar-graph file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise GraphVersionError(f"unsupported ssar-graph version {version} (this reader handles {FORMAT_VERSION})")
    if len(data) < 16 + hlen + 4:
        raise GraphFormatError("truncated header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise GraphFormatError("checksum mismatch: file is corrupt or truncated")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GraphFormatError(f"bad header: {exc}") from None
    n, nodes, storage = header["N"], tuple(header["nodes"]), header["storage"]
    pos = 16 + hlen
    end = len(data) - 4
    snaps = []
    try:
        for k in range(header["snapshot_count"]):
            idx, t = struct.unpack_from("<qq", data, pos)
            pos += 16
            signal = np.frombuffer(data, "<f8", n, pos).astype(np.float64)
            pos += 8 * n
            if storage == "dense":
                w = np.frombuffer(data, "<f8", n * n, pos).astype(np.float64).reshape(n, n)
                pos += 8 * n * n
            else:
                (nnz,) = struct.unpack_from("<I", data, pos)
                pos += 4
                rec = np.frombuffer(data, [("i", "<u4"), ("j", "<u4"), ("w", "<f8")], nnz, pos)
                pos += rec.nbytes
                w = np.zeros((n, n))
                w[rec["i"], rec["j"]] = rec["w"]
            if idx != k:
                raise GraphFormatError(f"snapshot index {idx} out of order (expected {k})")
            snaps.append(WeightedDiGraph(nodes, w, signal, int(t)))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, GraphFormatError):
            raise
        raise GraphFormatError(f"corrupt snapshot records: {exc}") from None
    if pos != end:
        raise GraphFormatError("trailing bytes after snapshot records")
    return TemporalGraph(
        tuple(snaps), header["first_t"], header["w_s"], header["measure"], _spec_from_dict(header["spec"])
    )


def save(g: TemporalGraph, path: str | Path, storage: str = "dense") -> None:
    Path(path).write_bytes(dumps(g, storage))


def load(path: str | Path) -> TemporalGraph:
    return loads(Path(path).read_bytes())


def export_jsonl(g: TemporalGraph, path: str | Path) -> None:
    """Debug mirror of the binary file: header line, then one line per snapshot."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(g, "dense"), sort_keys=True) + "\n")
        for k, snap in enumerate(g.snapshots):
            rec = {"index": k, "t": snap.t, "signal": snap.signal.tolist(), "weights": snap.weights.ravel().tolist()}
            fh.write(json.dumps(rec) + "\n")
