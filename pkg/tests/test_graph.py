import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssar.dataproc import DataError, TimeSeriesFrame
from ssar.depmeasures import MeasureKind, MeasureSpec, raw_measure
from ssar.graph import (
    AblationConfig,
    GraphFormatError,
    GraphVersionError,
    TemporalGraph,
    WeightedDiGraph,
    build_constant,
    build_snapshot,
    build_temporal,
    dumps,
    export_jsonl,
    load,
    loads,
    save,
)


def frame(T, N, seed=0):
    v = np.random.default_rng(seed).standard_normal((T, N))
    return TimeSeriesFrame(tuple(map(str, range(T))), tuple(f"n{j}" for j in range(N)), v)


def test_snapshot_weights_follow_measure_definition():
    f = frame(40, 3)
    spec = MeasureSpec("te", 20)
    g = build_snapshot(f, 30, spec)
    for i in range(3):
        for j in range(3):
            expect = 0.0 if i == j else abs(raw_measure(spec, f.values[10:30, i], f.values[10:30, j]))
            assert g.weights[i, j] == expect
    np.testing.assert_array_equal(g.signal, f.values[29])
    assert g.t == 30


def test_three_nodes_have_at_most_six_edges():
    g = build_snapshot(frame(30, 3), 25, MeasureSpec("gc", 20))
    assert g.edge_count <= 6
    assert all(a != b for a, b, _ in g.edges())


def test_identical_features_weight_one():
    v = np.random.default_rng(1).standard_normal((30, 1))
    f = TimeSeriesFrame(tuple(map(str, range(30))), ("a", "b"), np.hstack([v, v]))
    g = build_snapshot(f, 25, MeasureSpec("pearson", 20))
    assert g.weights[0, 1] == pytest.approx(1.0) and g.weights[1, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("T,count", [(100, 80), (21, 1)])
def test_snapshot_count(T, count):
    g = build_temporal(frame(T, 2), MeasureSpec("pearson", 20))
    assert len(g) == count and g.first_t == 20
    assert [s.t for s in g.snapshots] == list(range(20, T))


def test_frame_shorter_than_window():
    with pytest.raises(DataError):
        build_temporal(frame(20, 2), MeasureSpec("pearson", 20))
    with pytest.raises(IndexError):
        build_snapshot(frame(30, 2), 19, MeasureSpec("pearson", 20))


def test_missing_values_rejected():
    v = frame(30, 2).values.copy()
    v[3, 1] = np.nan
    f = TimeSeriesFrame(tuple(map(str, range(30))), ("a", "b"), v)
    with pytest.raises(DataError):
        build_temporal(f, MeasureSpec("pearson", 20))


def test_constant_ablation():
    f = frame(30, 3)
    g = build_constant(f, 20, AblationConfig(1.0))
    ref = build_temporal(f, MeasureSpec("pearson", 20))
    assert len(g) == len(ref)
    for a, b in zip(g.snapshots, ref.snapshots):
        assert a.edge_count == 6 and set(a.weights[~np.eye(3, dtype=bool)]) == {1.0}
        np.testing.assert_array_equal(a.signal, b.signal)
    with pytest.raises(ValueError):
        AblationConfig(0.0)
    neg = build_constant(f, 20, AblationConfig(-2.5))
    assert neg[0].weights[0, 1] == 2.5


def test_graph_invariants_enforced():
    with pytest.raises(ValueError):
        WeightedDiGraph(("a", "b"), np.ones((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        WeightedDiGraph(("a", "b"), np.array([[0, -1.0], [0, 0]]), np.zeros(2))
    g = WeightedDiGraph(("a", "b"), np.array([[0, 1.0], [0, 0]]), np.zeros(2), 5)
    with pytest.raises(ValueError):
        TemporalGraph((g,), 4, 4, "pearson")


def test_parallel_build_matches_serial():
    f = frame(80, 3)
    spec = MeasureSpec("spearman", 20)
    assert build_temporal(f, spec, workers=2) == build_temporal(f, spec)


@pytest.mark.parametrize("storage", ["dense", "list"])
def test_round_trip(tmp_path, storage):
    g = build_temporal(frame(30, 5), MeasureSpec("gc", 20))
    assert len(g) == 10
    path = tmp_path / "g.ssarg"
    save(g, path, storage=storage)
    h = load(path)
    assert h == g
    assert h.spec == g.spec and h.kind == "gc"
    for a, b in zip(g.snapshots, h.snapshots):
        assert a.weights.tobytes() == b.weights.tobytes()


def test_round_trip_constant_graph():
    g = build_constant(frame(25, 3), 20, AblationConfig(3.0))
    h = loads(dumps(g, "list"))
    assert h == g and h.spec is None


def test_truncated_and_corrupt_files():
    data = dumps(build_temporal(frame(25, 3), MeasureSpec("pearson", 20)))
    with pytest.raises(GraphFormatError):
        loads(data[:-10])
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(GraphFormatError):
        loads(bytes(flipped))
    with pytest.raises(GraphFormatError):
        loads(b"NOTAGRPH" + data[8:])


def test_newer_version_rejected():
    data = bytearray(dumps(build_temporal(frame(25, 3), MeasureSpec("pearson", 20))))
    data[8:12] = struct.pack("<I", 2)
    body = bytes(data[:-4])
    with pytest.raises(GraphVersionError):
        loads(body + struct.pack("<I", zlib.crc32(body)))


def test_jsonl_export(tmp_path):
    g = build_temporal(frame(24, 2), MeasureSpec("kendall", 20))
    path = tmp_path / "g.jsonl"
    export_jsonl(g, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["snapshot_count"] == 4 and header["nodes"] == ["n0", "n1"]
    rec = json.loads(lines[2])
    assert rec["t"] == 21 and rec["weights"] == g[1].weights.ravel().tolist()


# --- properties ----------------------------------------------------------------------------


kinds = st.sampled_from(list(MeasureKind))


@given(kinds, st.integers(2, 4), st.integers(0, 10_000))
def test_snapshot_invariants(kind, n, seed):
    f = frame(26, n, seed)
    g = build_temporal(f, MeasureSpec(kind, 20))
    assert len(g) == f.T - 20
    for s in g.snapshots:
        w = s.weights
        assert (np.diag(w) == 0).all() and (w >= 0).all() and np.isfinite(w).all()
        assert s.edge_count <= n * n - n
        if kind.symmetric:
            np.testing.assert_allclose(w, w.T, atol=1e-12, rtol=0)


@given(st.sampled_from(["pearson", "te", "mi"]), st.integers(0, 10_000), st.integers(21, 29))
def test_no_look_ahead(kind, seed, cut):
    f = frame(30, 3, seed)
    spec = MeasureSpec(kind, 20)
    g = build_temporal(f, spec)
    v = f.values.copy()
    v[cut:] += np.random.default_rng(seed + 1).standard_normal(v[cut:].shape) * 5
    h = build_temporal(f.with_values(v), spec)
    for a, b in zip(g.snapshots, h.snapshots):
        if a.t <= cut:
            assert a.weights.tobytes() == b.weights.tobytes()
            assert a.signal.tobytes() == b.signal.tobytes()


@given(kinds, st.integers(0, 1000))
def test_temporal_is_map_of_snapshots(kind, seed):
    f = frame(24, 3, seed)
    spec = MeasureSpec(kind, 20)
    g = build_temporal(f, spec)
    assert list(g.snapshots) == [build_snapshot(f, t, spec) for t in range(20, 24)]
