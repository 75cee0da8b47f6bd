"""Channel-independent linear forecasters (Linear, NLinear, DLinear) on flat windows.

A window is ``[w_s, N]``; every feature is mapped to its next value by the same
length-``w_s`` weight vector.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import ParamSet
from .tgcn import FitResult, HyperParams, minibatch_adam


class LinearKind(str, enum.Enum):
    LINEAR = "linear"
    NLINEAR = "nlinear"
    DLINEAR = "dlinear"


def default_kernel(window: int) -> int:
    """min(25, largest odd number <= window)."""
    return min(25, window if window % 2 else window - 1)


def moving_average(windows: np.ndarray, kernel: int) -> np.ndarray:
    """Centered moving average along axis 1 of ``[B, L, N]`` with edge padding."""
    pad = kernel // 2
    padded = np.concatenate(
        [np.repeat(windows[:, :1], pad, axis=1), windows, np.repeat(windows[:, -1:], pad, axis=1)], axis=1
    )
    csum = np.cumsum(padded, axis=1)
    csum = np.concatenate([np.zeros_like(csum[:, :1]), csum], axis=1)
    return (csum[:, kernel:] - csum[:, :-kernel]) / kernel


def _trend_matrix(window: int, kernel: int) -> np.ndarray:
    """Linear operator A with trend = A @ x for a single length-``window`` series."""
    eye = np.eye(window)[None].transpose(0, 2, 1)  # columns are unit series
    # run each unit vector through the moving average: [1, L, L] -> trend of basis
    return moving_average(eye, kernel)[0]


@dataclass
class LinearModel:
    kind: LinearKind
    window: int
    params: ParamSet
    kernel: int = 0

    def __post_init__(self):
        self.kind = LinearKind(self.kind)
        if self.kind is LinearKind.DLINEAR:
            if self.kernel % 2 == 0 or not 1 <= self.kernel <= self.window:
                raise ValueError(f"moving-average kernel {self.kernel} must be odd and <= {self.window}")
            self._trend = _trend_matrix(self.window, self.kernel)

    @classmethod
    def init(cls, kind, window: int, rng: np.random.Generator, kernel: int | None = None) -> "LinearModel":
        kind = LinearKind(kind)
        bound = 1.0 / math.sqrt(window)
        if kind is LinearKind.DLINEAR:
            arrays = {
                "w_trend": rng.uniform(-bound, bound, window),
                "w_season": rng.uniform(-bound, bound, window),
                "bias": np.asarray(rng.uniform(-bound, bound)),
            }
        else:
            arrays = {"weight": rng.uniform(-bound, bound, window), "bias": np.asarray(rng.uniform(-bound, bound))}
        return cls(kind, window, ParamSet(arrays), kernel if kernel is not None else default_kernel(window))

    # features: [B, L, N] -> design tensors the weights act on
    def _parts(self, windows: np.ndarray):
        if self.kind is LinearKind.LINEAR:
            return {"weight": windows}, 0.0
        if self.kind is LinearKind.NLINEAR:
            last = windows[:, -1:, :]
            return {"weight": windows - last}, last[:, 0, :]
        trend = np.einsum("lm,bmn->bln", self._trend, windows)
        return {"w_trend": trend, "w_season": windows - trend}, 0.0

    def _check(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 2:
            windows = windows[None]
        if windows.ndim != 3 or windows.shape[1] != self.window:
            raise ValueError(f"expected windows of length {self.window}, got shape {windows.shape}")
        return windows

    def predict_batch(self, windows: np.ndarray, params: ParamSet | None = None) -> np.ndarray:
        params = params if params is not None else self.params
        parts, offset = self._parts(self._check(windows))
        out = offset + params["bias"]
        for name, x in parts.items():
            out = out + np.einsum("l,bln->bn", params[name], x)
        return out

    def predict(self, window: np.ndarray) -> np.ndarray:
        """``[w_s, N]`` window -> ``[N]`` forecast."""
        return self.predict_batch(window)[0]

    def loss_and_grad(self, params: ParamSet, windows: np.ndarray, targets: np.ndarray):
        parts, offset = self._parts(self._check(windows))
        pred = offset + params["bias"]
        for name, x in parts.items():
            pred = pred + np.einsum("l,bln->bn", params[name], x)
        resid = pred - targets
        d = 2.0 * resid / resid.size
        grads = {name: np.einsum("bn,bln->l", d, x) for name, x in parts.items()}
        grads["bias"] = np.asarray(d.sum())
        return float(np.mean(resid ** 2)), ParamSet({k: grads[k] for k in params.names()})

    def with_params(self, params: ParamSet) -> "LinearModel":
        return LinearModel(self.kind, self.window, params, self.kernel)


def fit(kind, windows: np.ndarray, targets: np.ndarray, hp: HyperParams, seed: int,
        kernel: int | None = None) -> tuple[LinearModel, FitResult]:
    """Adam on MSE with the same minibatch/epoch loop as the graph model."""
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ValueError("need at least one [w_s, N] training window")
    rng = np.random.default_rng(seed)
    model = LinearModel.init(kind, windows.shape[1], rng, kernel)

    def batch_fn(params, idx):
        return model.loss_and_grad(params, windows[idx], targets[idx])

    def full_loss(params):
        return model.loss_and_grad(params, windows, targets)[0]

    result = minibatch_adam(model.params, batch_fn, windows.shape[0], hp, rng, full_loss)
    return model.with_params(result.params), result


def persistence(window: int) -> LinearModel:
    """Linear model that repeats the last observed value."""
    w = np.zeros(window)
    w[-1] = 1.0
    return LinearModel(LinearKind.LINEAR, window, ParamSet({"weight": w, "bias": np.zeros(())}))
