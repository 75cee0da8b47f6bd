"""Acceptance gate: nine end-to-end criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are
also repeated in the terminal summary.
"""
import gc
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from oracles import (
    dcgru_oracle,
    diffusion_conv_oracle,
    fd_gradient_error,
    kendall_pairs,
    nmi_oracle,
    random_instance,
    spearman_oracle,
    te_oracle,
    transition_oracle,
)
from ssar import tgcn, trainer
from ssar.dataproc import SplitRatios, TimeSeriesFrame
from ssar.depmeasures import (
    MeasureKind,
    MeasureSpec,
    WindowPair,
    entropy,
    granger_geweke,
    kendall,
    measure,
    nmi,
    spearman,
    sturges_bins,
    transfer_entropy,
)
from ssar.graph import WeightedDiGraph, build_temporal
from ssar.synthlab import SynthConfig, gen_coupled, gen_regime_switching, pair_coupling

ACCEPTANCE_SEED = 0


@pytest.fixture(autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


def random_windows(seed, count, sizes=(20, 50, 80)):
    """Half continuous, half rounded to force ties."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        n = sizes[i % len(sizes)]
        x, y = rng.standard_normal(n), 0.5 * rng.standard_normal(n)
        y = y + rng.uniform(-1, 1) * x
        if i % 2:
            x, y = np.round(x, 1), np.round(y, 1)
        yield x, y


def test_criterion_1_measure_oracles(record):
    start = time.perf_counter()
    worst = {"kendall": 0.0, "spearman": 0.0, "nmi": 0.0, "te": 0.0}
    kendall_exact = True
    for x, y in random_windows(ACCEPTANCE_SEED, 1000):
        b = sturges_bins(x.size)
        kendall_exact &= kendall(x, y) == kendall_pairs(x.tolist(), y.tolist())
        worst["spearman"] = max(worst["spearman"], abs(spearman(x, y) - spearman_oracle(x.tolist(), y.tolist())))
        worst["nmi"] = max(worst["nmi"], abs(nmi(x, y, b) - nmi_oracle(x, y, b)))
        worst["te"] = max(worst["te"], abs(transfer_entropy(x, y, b) - max(0.0, te_oracle(x, y, b))))
    elapsed = time.perf_counter() - start
    ok = (kendall_exact and worst["spearman"] <= 1e-12 and worst["nmi"] <= 1e-10
          and worst["te"] <= 1e-10 and elapsed < 60)
    record(1, ok, f"kendall exact={kendall_exact}, max |err| spearman={worst['spearman']:.2e} "
                  f"nmi={worst['nmi']:.2e} te={worst['te']:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_measure_invariants(record):
    failures = []
    monotone = (lambda v: np.exp(v / 4), lambda v: v ** 3 + v, np.arctan)
    for i, (x, y) in enumerate(random_windows(ACCEPTANCE_SEED + 1, 300)):
        n = x.size
        for kind in MeasureKind:
            spec = MeasureSpec(kind, n)
            w = measure(spec, WindowPair(x, y))
            if not (math.isfinite(w) and w >= 0):
                failures.append(f"{kind.value} weight {w}")
            if kind.symmetric and abs(w - measure(spec, WindowPair(y, x))) > 1e-12:
                failures.append(f"{kind.value} asymmetric")
        b = sturges_bins(n)
        v = nmi(x, y, b)
        if not 0 <= v <= 1 or nmi(x, x, b) != 1.0:
            failures.append(f"nmi range {v}")
        if entropy(x, b) > math.log2(b) or entropy(y, b) > math.log2(b):
            failures.append("entropy bound")
        fx = monotone[i % 3](x)
        if len(np.unique(fx)) == len(np.unique(x)):
            if kendall(fx, y) != kendall(x, y) or abs(spearman(fx, y) - spearman(x, y)) > 1e-12:
                failures.append("rank invariance")
    ok = not failures
    record(2, ok, "symmetry, nonnegativity, nmi range, entropy bound, rank invariance on 300 windows"
                  + ("" if ok else f"; {failures[:3]}"))
    assert ok


def test_criterion_3_directionality(record):
    start = time.perf_counter()
    f = gen_coupled(SynthConfig(2, 2000, pair_coupling(2, 0, 1, 0.8), seed=ACCEPTANCE_SEED))
    x1, x2 = f.values[-500:, 0], f.values[-500:, 1]
    bins = sturges_bins(500)
    te_fwd, te_rev = transfer_entropy(x1, x2, bins), transfer_entropy(x2, x1, bins)
    gc_fwd, gc_rev = granger_geweke(x1, x2), granger_geweke(x2, x1)
    rng = np.random.default_rng(ACCEPTANCE_SEED + 1)
    null_te, null_gc = [], []
    for _ in range(200):
        shuffled = rng.permutation(x2)  # reversed direction: x2 is the source
        null_te.append(transfer_entropy(shuffled, x1, bins))
        null_gc.append(granger_geweke(shuffled, x1))
    q_te, q_gc = np.percentile(null_te, 95), np.percentile(null_gc, 95)
    elapsed = time.perf_counter() - start
    ok = te_fwd > te_rev and gc_fwd > gc_rev and te_rev < q_te and gc_rev < q_gc and elapsed < 120
    record(3, ok, f"TE {te_fwd:.4f} > {te_rev:.4f} (null95 {q_te:.4f}); "
                  f"GC {gc_fwd:.4f} > {gc_rev:.4f} (null95 {q_gc:.4f}); {elapsed:.1f}s")
    assert ok


def test_criterion_4_graph_invariants(record):
    N, T, w_s = 4, 60, 20
    f = gen_coupled(SynthConfig(N, T, pair_coupling(N, 0, 1, 0.8), seed=ACCEPTANCE_SEED))
    failures = []
    cut = 45
    v = f.values.copy()
    v[cut:] = np.random.default_rng(9).standard_normal(v[cut:].shape) * 3
    changed = f.with_values(v)
    for kind in MeasureKind:
        spec = MeasureSpec(kind, w_s)
        g = build_temporal(f, spec)
        if len(g) != T - w_s:
            failures.append(f"{kind.value}: {len(g)} snapshots")
        for s in g.snapshots:
            if (np.diag(s.weights) != 0).any() or np.count_nonzero(s.weights) > N * N - N:
                failures.append(f"{kind.value}: t={s.t} edges")
        h = build_temporal(changed, spec)
        for a, b in zip(g.snapshots, h.snapshots):
            if a.t <= cut and (a.weights.tobytes() != b.weights.tobytes() or a.signal.tobytes() != b.signal.tobytes()):
                failures.append(f"{kind.value}: look-ahead at t={a.t}")
    ok = not failures
    record(4, ok, f"6 measures: zero diagonal, <= N^2-N edges, T-w_s snapshots, no look-ahead"
                  + ("" if ok else f"; {failures[:3]}"))
    assert ok


def _graph(w, signal):
    return WeightedDiGraph(tuple(f"v{i}" for i in range(w.shape[0])), w, signal)


def test_criterion_5_model_math(record):
    worst_step = worst_conv = worst_rows = worst_series = 0.0
    halving = True
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        N, Q, K = int(rng.integers(2, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        params, weights, signals, _ = random_instance(seed, N=N, Q=Q, K=K, M=1)
        g = _graph(weights[0], signals[0])
        h = rng.standard_normal((N, Q))
        worst_step = max(worst_step, np.abs(tgcn.dcgru_step(signals[0], h, params, g)
                                            - dcgru_oracle(signals[0], h, params, weights[0])).max())
        X = rng.standard_normal((N, 1 + Q))
        worst_conv = max(worst_conv, np.abs(tgcn.diffusion_conv(X, g, params["theta_c"])
                                            - diffusion_conv_oracle(X, weights[0], params["theta_c"])).max())
        zero = tgcn.ModelParams.zeros(Q, K)
        halving &= bool((tgcn.dcgru_step(signals[0], h, zero, g) == 0.5 * h).all())
        for p in tgcn.transition_matrices(g):
            sums = p.sum(axis=1)
            worst_rows = max(worst_rows, np.abs(sums[sums != 0] - 1).max(initial=0.0))
        dense = rng.uniform(0.1, 1, (N, N))
        np.fill_diagonal(dense, 0)
        P = tgcn.stationary_diffusion(dense)
        worst_series = max(worst_series, np.abs(P.sum(axis=1) - 1).max())
        np.testing.assert_allclose(tgcn.transition_matrices(dense)[0], transition_oracle(dense)[0], atol=1e-15)
    ok = worst_step <= 1e-12 and worst_conv <= 1e-12 and halving and worst_rows <= 1e-12 and worst_series <= 1e-8
    record(5, ok, f"dcgru {worst_step:.1e}, conv {worst_conv:.1e}, halving exact={halving}, "
                  f"row sums {worst_rows:.1e}, restart-walk rows {worst_series:.1e}")
    assert ok


def test_criterion_6_gradient_check(record):
    start = time.perf_counter()
    errors = [fd_gradient_error(seed, step=1e-5, N=3, Q=4, K=2, M=2) for seed in range(100)]
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    record(6, ok, f"max relative error {max(errors):.2e} over 100 instances, {elapsed:.1f}s")
    assert ok


def _regime_frame():
    n = 5
    up, down = np.zeros((n, n)), np.zeros((n, n))
    for i in range(n):
        up[i, i] = down[i, i] = 0.5
        up[i, (i + 1) % n] = 0.4
        down[i, (i + 1) % n] = -0.4
    return gen_regime_switching(SynthConfig(n, 3000, regimes=((0, up), (1500, down)), seed=ACCEPTANCE_SEED))


def test_criterion_7_end_to_end_learning(record):
    start = time.perf_counter()
    frame = _regime_frame()
    cfg = trainer.ExperimentConfig(measures=("pearson",), windows=(20,), ratios=SplitRatios(0.6, 0.2, 0.2),
                                   seed=ACCEPTANCE_SEED)
    cell = trainer.prepare_cell(cfg, frame, "pearson", 20)
    hp = tgcn.HyperParams(M=8, Q=16, K=2, lr=1e-3, epochs=20)
    seed = trainer.derive_seed(cfg.seed, "pearson", 20, 1, 0, 1)
    model = trainer.train_one(cell, hp, cell.ends("train", hp.M), seed)
    test_mse = trainer.segment_mse(cell, model, "test")
    train_ends, test_ends = cell.ends("train", hp.M), cell.ends("test", hp.M)
    mean_pred = cell.targets[train_ends].mean(axis=0)
    mean_mse = float(np.mean((cell.targets[test_ends] - mean_pred) ** 2))
    ratio = model.fit.final_loss / model.fit.initial_loss
    elapsed = time.perf_counter() - start
    ok = ratio <= 0.8 and test_mse < mean_mse and elapsed < 600
    record(7, ok, f"train loss {model.fit.initial_loss:.4f} -> {model.fit.final_loss:.4f} (x{ratio:.3f}); "
                  f"test MSE {test_mse:.4f} vs train-mean {mean_mse:.4f}; {elapsed:.1f}s")
    assert ok


def test_criterion_8_protocol(record):
    frame = gen_coupled(SynthConfig(4, 400, pair_coupling(4, 0, 1, 0.8), seed=ACCEPTANCE_SEED))
    space = trainer.GridSpace(M=(2, 4), Q=(8,), lr=(1e-2, 1e-3), epochs=(3,), K=(1, 2))
    cfg = trainer.ExperimentConfig(
        measures=("pearson", "te"), windows=(20, 30), trials=3, test_samples=3, seed=ACCEPTANCE_SEED,
        ablation=True, ablation_constant=1.0, gcn_space=space,
        baseline_space=trainer.GridSpace(lr=(1e-2,), epochs=(5,)),
    )
    first = trainer.run_experiment(cfg, frame)
    second = trainer.run_experiment(cfg, frame)
    identical = first.to_json() == second.to_json() and first.summary_csv() == second.summary_csv()
    rows = [r.split(",") for r in first.summary_csv().splitlines()]
    layout = (rows[0][:3] == ["w_s", "pearson", "te"] and [r[0] for r in rows[1:]] == ["20", "30"]
              and all("±" in c for r in rows[1:] for c in r[1:3]))
    cells_ok = all(len(first.cell(m, w).test_mses) == 3 and first.cell(m, w).error is None
                   for m in ("pearson", "te", "constant") for w in (20, 30))
    splits = all(trainer.prepare_cell(cfg, frame, m, w).counts == trainer.prepare_cell(cfg, frame, "pearson", w).counts
                 for m in ("te", "constant") for w in (20, 30))
    ok = identical and layout and cells_ok and splits
    record(8, ok, f"layout={layout}, byte-identical rerun={identical}, 3 samples per cell={cells_ok}, "
                  f"constant ablation on shared splits={splits}")
    assert ok


def _timed_builds(sizes, reps=5):
    spec = MeasureSpec("pearson", 20)
    frames = []
    for T, N in sizes:
        v = np.random.default_rng(T + N).standard_normal((T, N))
        frames.append(TimeSeriesFrame(tuple(map(str, range(T))), tuple(f"f{j}" for j in range(N)), v))
    build_temporal(frames[0], spec)
    best = [math.inf] * len(frames)
    for _ in range(reps):
        for i, f in enumerate(frames):  # interleaved so slow spells hit every size
            gc.collect()
            gc.disable()
            try:
                t0 = time.process_time()
                build_temporal(f, spec)
                best[i] = min(best[i], time.process_time() - t0)
            finally:
                gc.enable()
    return best


def _exponent(xs, ts):
    return float(np.polyfit(np.log(xs), np.log(ts), 1)[0])


def test_criterion_9_complexity(record):
    Ts, Ns = (2000, 4000, 8000), (4, 8, 16)
    t_times = _timed_builds([(T, 4) for T in Ts])
    n_times = _timed_builds([(600, N) for N in Ns])
    # snapshot count is T - w_s
    e_T = _exponent([T - 20 for T in Ts], t_times)
    e_N = _exponent(Ns, n_times)
    ok = abs(e_T - 1) <= 0.25 and abs(e_N / 2 - 1) <= 0.25
    ratios_T = [b / a for a, b in zip(t_times, t_times[1:])]
    ratios_N = [b / a for a, b in zip(n_times, n_times[1:])]
    record(9, ok, f"time ~ T^{e_T:.2f} (doubling ratios {ratios_T[0]:.2f}, {ratios_T[1]:.2f}), "
                  f"~ N^{e_N:.2f} (ratios {ratios_N[0]:.2f}, {ratios_N[1]:.2f})")
    assert ok
