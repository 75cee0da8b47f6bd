"""Diffusion-convolutional GRU for one-step-ahead node forecasting.

Shapes used throughout (batched internally, ``B`` samples):

* supports ``S``: ``[B, 2K, N, N]``, first the forward powers ``P_fwd^0..P_fwd^{K-1}``,
  then the reverse powers ``P_rev^0..P_rev^{K-1}``; the 0th power is the identity.
* filters ``theta``: ``[Q, C, K, 2]`` (output channel, input channel, step, direction).
* signals ``X``: ``[B, N, C]``.

Gradients are hand-derived reverse-mode passes over this fixed graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import ParamSet
from .depmeasures import MeasureKind
from .graph import CONSTANT_KIND, WeightedDiGraph


class NonFiniteError(FloatingPointError):
    """Forward pass produced NaN/inf; carries the name of the offending gate."""


@dataclass(frozen=True)
class HyperParams:
    M: int = 8
    Q: int = 16
    K: int = 2
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32

    def __post_init__(self):
        for name in ("M", "Q", "K", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def check_kind(self, kind: str) -> None:
        """Non-linear measures only support a single diffusion step."""
        if kind != CONSTANT_KIND and not MeasureKind.parse(kind).linear and self.K != 1:
            raise ValueError(f"K must be 1 for measure {kind!r}, got {self.K}")

    def to_dict(self) -> dict:
        return {"M": self.M, "Q": self.Q, "K": self.K, "lr": self.lr, "epochs": self.epochs,
                "batch_size": self.batch_size}


@dataclass(frozen=True)
class DiffusionConfig:
    alpha: float = 0.1
    tol: float = 1e-12
    max_terms: int = 100_000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


GATES = ("r", "u", "c")


class ModelParams(ParamSet):
    """DCGRU filters and biases plus the node-shared linear head."""

    @property
    def Q(self) -> int:
        return self["theta_r"].shape[0]

    @property
    def K(self) -> int:
        return self["theta_r"].shape[2]

    @classmethod
    def zeros(cls, Q: int, K: int) -> "ModelParams":
        c = 1 + Q
        arrays = {}
        for g in GATES:
            arrays[f"theta_{g}"] = np.zeros((Q, c, K, 2))
            arrays[f"b_{g}"] = np.zeros(Q)
        arrays["w_out"] = np.zeros(Q)
        arrays["b_out"] = np.zeros(())
        return cls(arrays)

    @classmethod
    def init(cls, Q: int, K: int, rng: np.random.Generator) -> "ModelParams":
        """Uniform in +-1/sqrt(fan_in) per layer, biases included."""
        c = 1 + Q
        arrays = {}
        bound = 1.0 / math.sqrt(c * K * 2)
        for g in GATES:
            arrays[f"theta_{g}"] = rng.uniform(-bound, bound, (Q, c, K, 2))
            arrays[f"b_{g}"] = rng.uniform(-bound, bound, Q)
        bound = 1.0 / math.sqrt(Q)
        arrays["w_out"] = rng.uniform(-bound, bound, Q)
        arrays["b_out"] = np.asarray(rng.uniform(-bound, bound))
        return cls(arrays)


# --- graph operators ---------------------------------------------------------------


def _row_normalize(w: np.ndarray) -> np.ndarray:
    deg = w.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return w * inv[:, None]


def transition_matrices(g: WeightedDiGraph | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``D_O^-1 W`` and ``D_I^-1 W^T``; rows of zero-degree nodes stay zero."""
    w = g.weights if isinstance(g, WeightedDiGraph) else np.asarray(g, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("transition matrices need nonnegative weights")
    return _row_normalize(w), _row_normalize(w.T)


def supports(g: WeightedDiGraph | np.ndarray, K: int) -> np.ndarray:
    """Stacked diffusion powers ``[2K, N, N]``."""
    p_fwd, p_rev = transition_matrices(g)
    n = p_fwd.shape[0]
    out = np.empty((2 * K, n, n))
    for d, p in enumerate((p_fwd, p_rev)):
        acc = np.eye(n)
        for k in range(K):
            out[d * K + k] = acc
            if k + 1 < K:
                acc = p @ acc
    return out


def stationary_diffusion(g: WeightedDiGraph | np.ndarray, cfg: DiffusionConfig = DiffusionConfig()) -> np.ndarray:
    """Truncated restart-walk sum ``sum_k alpha (1-alpha)^k P_fwd^k``.

    Stops once the newest term's largest entry falls below ``cfg.tol``.
    Not used in training.
    """
    if cfg.alpha == 0:
        raise ValueError("alpha = 0 makes the series divergent")
    p_fwd, _ = transition_matrices(g)
    term = cfg.alpha * np.eye(p_fwd.shape[0])
    total = term.copy()
    for _ in range(cfg.max_terms):
        term = (1.0 - cfg.alpha) * (term @ p_fwd)
        if np.abs(term).max() < cfg.tol:
            break
        total += term
    else:
        raise RuntimeError("stationary diffusion did not converge")
    return total


def _filter_matrix(theta: np.ndarray) -> np.ndarray:
    """[Q, C, K, 2] -> [(2K * C), Q] matching the flattened support-major layout."""
    q, c, k, _ = theta.shape
    return theta.transpose(3, 2, 1, 0).reshape(2 * k * c, q)


def _filter_grad(dw: np.ndarray, shape) -> np.ndarray:
    q, c, k, _ = shape
    return dw.reshape(2, k, c, q).transpose(3, 2, 1, 0)


def _diffuse(S: np.ndarray, X: np.ndarray) -> np.ndarray:
    """[B, 2K, N, N] x [B, N, C] -> flattened [B, N, 2K*C]."""
    Z = S @ X[:, None]
    b, s, n, c = Z.shape
    return Z.transpose(0, 2, 1, 3).reshape(b, n, s * c)


def _diffuse_back(S: np.ndarray, dZr: np.ndarray, c: int) -> np.ndarray:
    b, n, _ = dZr.shape
    dZ = dZr.reshape(b, n, -1, c).transpose(0, 2, 1, 3)
    return (S.transpose(0, 1, 3, 2) @ dZ).sum(axis=1)


def diffusion_conv(X: np.ndarray, g: WeightedDiGraph, theta: np.ndarray,
                   activation: Callable[[np.ndarray], np.ndarray] = np.tanh) -> np.ndarray:
    """One diffusion-convolution layer on an ``[N, C]`` signal; returns ``[N, Q]``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    q, c, k, two = theta.shape
    if two != 2 or X.shape != (g.N, c):
        raise ValueError(f"signal {X.shape} incompatible with filter {theta.shape} on {g.N} nodes")
    S = supports(g, k)[None]
    return activation((_diffuse(S, X[None]) @ _filter_matrix(theta))[0])


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _check(name: str, a: np.ndarray) -> None:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite values in gate {name!r}")


@dataclass
class _StepCache:
    S: np.ndarray
    x: np.ndarray
    h: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    r: np.ndarray
    u: np.ndarray
    c: np.ndarray


def _cell(params: ModelParams, S, x, h, W):
    """Single DCGRU update on a batch. ``x``: [B, N, 1], ``h``: [B, N, Q]."""
    z1 = _diffuse(S, np.concatenate([x, h], axis=2))
    r = _sigmoid(z1 @ W["r"] + params["b_r"])
    _check("r", r)
    u = _sigmoid(z1 @ W["u"] + params["b_u"])
    _check("u", u)
    z2 = _diffuse(S, np.concatenate([x, r * h], axis=2))
    c = np.tanh(z2 @ W["c"] + params["b_c"])
    _check("c", c)
    h_new = u * h + (1.0 - u) * c
    return h_new, _StepCache(S, x, h, z1, z2, r, u, c)


def _cell_back(params: ModelParams, W, cache: _StepCache, dh_new, grads):
    ch = cache.h.shape[2] + 1
    du = dh_new * (cache.h - cache.c)
    dc = dh_new * (1.0 - cache.u)
    dh = dh_new * cache.u

    da_c = dc * (1.0 - cache.c ** 2)
    grads["W_c"] += cache.z2.reshape(-1, cache.z2.shape[2]).T @ da_c.reshape(-1, da_c.shape[2])
    grads["b_c"] += da_c.sum(axis=(0, 1))
    dxrh = _diffuse_back(cache.S, da_c @ W["c"].T, ch)
    drh = dxrh[:, :, 1:]
    dr = drh * cache.h
    dh += drh * cache.r

    da_r = dr * cache.r * (1.0 - cache.r)
    da_u = du * cache.u * (1.0 - cache.u)
    z1f = cache.z1.reshape(-1, cache.z1.shape[2]).T
    grads["W_r"] += z1f @ da_r.reshape(-1, da_r.shape[2])
    grads["W_u"] += z1f @ da_u.reshape(-1, da_u.shape[2])
    grads["b_r"] += da_r.sum(axis=(0, 1))
    grads["b_u"] += da_u.sum(axis=(0, 1))
    dxh = _diffuse_back(cache.S, da_r @ W["r"].T + da_u @ W["u"].T, ch)
    dh += dxh[:, :, 1:]
    return dh


def forward_batch(params: ModelParams, S: np.ndarray, X: np.ndarray, keep_cache: bool = False):
    """``S``: [B, M, 2K, N, N], ``X``: [B, M, N] -> predictions [B, N]."""
    b, m, _, n, _ = S.shape
    W = {g: _filter_matrix(params[f"theta_{g}"]) for g in GATES}
    h = np.zeros((b, n, params.Q))
    caches = []
    for step in range(m):
        h, cache = _cell(params, S[:, step], X[:, step, :, None], h, W)
        if keep_cache:
            caches.append(cache)
    pred = h @ params["w_out"] + params["b_out"]
    _check("output", pred)
    return (pred, h, W, caches) if keep_cache else pred


def loss_and_grad(params: ModelParams, S: np.ndarray, X: np.ndarray, Y: np.ndarray):
    """Batch MSE (mean over samples and nodes) and its exact gradient."""
    pred, h_last, W, caches = forward_batch(params, S, X, keep_cache=True)
    resid = pred - Y
    loss = float(np.mean(resid ** 2))
    dpred = 2.0 * resid / resid.size

    grads = {f"W_{g}": np.zeros_like(W[g]) for g in GATES}
    grads.update({f"b_{g}": np.zeros(params.Q) for g in GATES})
    w_out = params["w_out"]
    g_w_out = np.einsum("bn,bnq->q", dpred, h_last)
    g_b_out = np.asarray(dpred.sum())
    dh = dpred[:, :, None] * w_out
    for cache in reversed(caches):
        dh = _cell_back(params, W, cache, dh, grads)

    out = {}
    for g in GATES:
        out[f"theta_{g}"] = _filter_grad(grads[f"W_{g}"], params[f"theta_{g}"].shape)
        out[f"b_{g}"] = grads[f"b_{g}"]
    out["w_out"] = g_w_out
    out["b_out"] = g_b_out
    return loss, ModelParams({k: out[k] for k in params.names()})


# --- single-window convenience API ----------------------------------------------------


def _window_arrays(window: Sequence[WeightedDiGraph], K: int):
    nodes = window[0].nodes
    if any(g.nodes != nodes for g in window):
        raise ValueError("all snapshots in a window must share the node set")
    S = np.stack([supports(g, K) for g in window])[None]
    X = np.stack([g.signal for g in window])[None]
    return S, X


def dcgru_step(x: np.ndarray, h_prev: np.ndarray, params: ModelParams, g: WeightedDiGraph) -> np.ndarray:
    """One cell update; ``x``: [N] or [N, 1], ``h_prev``: [N, Q]."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x.shape[0] != g.N or h_prev.shape != (g.N, params.Q):
        raise ValueError(f"shapes x{x.shape}, h{h_prev.shape} do not fit {g.N} nodes and Q={params.Q}")
    W = {k: _filter_matrix(params[f"theta_{k}"]) for k in GATES}
    S = supports(g, params.K)[None]
    h, _ = _cell(params, S, x[None], h_prev[None], W)
    return h[0]


def forward(params: ModelParams, window: Sequence[WeightedDiGraph], hp: HyperParams | None = None) -> np.ndarray:
    """Predict the next node signal ``[N]`` from ``M`` chronological snapshots."""
    if hp is not None and len(window) != hp.M:
        raise ValueError(f"window holds {len(window)} snapshots, hyperparameters say M={hp.M}")
    S, X = _window_arrays(window, params.K)
    return forward_batch(params, S, X)[0]


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"prediction length {pred.size} != target length {target.size}")
    return float(np.mean((pred - target) ** 2))


def gradients(params: ModelParams, window: Sequence[WeightedDiGraph], target, hp: HyperParams | None = None) -> ModelParams:
    if hp is not None and len(window) != hp.M:
        raise ValueError(f"window holds {len(window)} snapshots, hyperparameters say M={hp.M}")
    S, X = _window_arrays(window, params.K)
    Y = np.asarray(target, dtype=np.float64).reshape(1, -1)
    _, grads = loss_and_grad(params, S, X, Y)
    return grads


# --- optimizer ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, **kw) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), **kw)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float):
    """Bias-corrected Adam; returns new ``(params, state)`` and leaves the inputs untouched."""
    if params.shapes() != grads.shapes() or params.shapes() != state.m.shapes():
        raise ValueError("parameter, gradient and optimizer-state shapes differ")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = state.m.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, grads)
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps), m, v)
    return new, AdamState(m, v, t, b1, b2, state.eps)


@dataclass
class FitResult:
    params: ParamSet
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan


def minibatch_adam(params: ParamSet, batch_fn, n_samples: int, hp: HyperParams,
                   rng: np.random.Generator, full_loss=None) -> FitResult:
    """Shared training loop: shuffled minibatches, one Adam step per batch.

    ``batch_fn(params, idx) -> (loss, grads)``; ``full_loss(params)`` (optional)
    evaluates the whole training set before and after training.
    """
    if n_samples < 1:
        raise ValueError("no training samples")
    result = FitResult(params)
    if full_loss is not None:
        result.initial_loss = full_loss(params)
    state = AdamState.zeros_like(params)
    for _ in range(hp.epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            loss, grads = batch_fn(params, idx)
            params, state = adam_step(params, grads, state, hp.lr)
            total += loss * idx.size
        result.epoch_losses.append(total / n_samples)
    result.params = params
    if full_loss is not None:
        result.final_loss = full_loss(params)
    return result


# --- training over a temporal graph --------------------------------------------------------


@dataclass
class SnapshotData:
    """Precomputed supports/signals for a snapshot sequence plus per-snapshot targets.

    Sample ``k`` reads snapshots ``k-M+1 .. k`` and predicts ``targets[k]``.
    """

    supports: np.ndarray  # [n, 2K, N, N]
    signals: np.ndarray  # [n, N]
    targets: np.ndarray  # [n, N]

    @classmethod
    def from_graph(cls, graph, targets: np.ndarray, K: int) -> "SnapshotData":
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (len(graph), graph.N):
            raise ValueError(f"targets shape {targets.shape}, expected {(len(graph), graph.N)}")
        S = np.stack([supports(g, K) for g in graph.snapshots])
        return cls(S, graph.signals_array(), targets)

    @property
    def K(self) -> int:
        return self.supports.shape[1] // 2

    def batch(self, ends: np.ndarray, M: int):
        ends = np.asarray(ends, dtype=np.int64)
        if ends.size and (ends.min() < M - 1 or ends.max() >= len(self.signals)):
            raise IndexError(f"sample ends must lie in [{M - 1}, {len(self.signals) - 1}]")
        idx = ends[:, None] - (M - 1) + np.arange(M)[None, :]
        return self.supports[idx], self.signals[idx], self.targets[ends]


def predict_samples(params: ModelParams, data: SnapshotData, ends: np.ndarray, M: int,
                    chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(ends), chunk):
        S, X, _ = data.batch(ends[start : start + chunk], M)
        out.append(forward_batch(params, S, X))
    return np.concatenate(out) if out else np.zeros((0, data.signals.shape[1]))


def fit(data: SnapshotData, ends: np.ndarray, hp: HyperParams, seed: int, kind: str | None = None):
    """Train a fresh model on the samples ending at ``ends``; deterministic per seed."""
    if kind is not None:
        hp.check_kind(kind)
    if data.K != hp.K:
        raise ValueError(f"supports were built for K={data.K}, hyperparameters say K={hp.K}")
    ends = np.asarray(ends, dtype=np.int64)
    rng = np.random.default_rng(seed)
    params = ModelParams.init(hp.Q, hp.K, rng)

    def batch_fn(p, idx):
        S, X, Y = data.batch(ends[idx], hp.M)
        return loss_and_grad(p, S, X, Y)

    def full_loss(p):
        pred = predict_samples(p, data, ends, hp.M)
        return float(np.mean((pred - data.targets[ends]) ** 2))

    return minibatch_adam(params, batch_fn, len(ends), hp, rng, full_loss)
