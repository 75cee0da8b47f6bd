"""Sliding-window dependency measures used as edge weights.

All functions take two equal-length windows. ``src`` is the candidate cause
and ``dst`` the effect; the correlation family and NMI ignore the order.
Entropy quantities are in bits.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

MIN_WINDOW = 20


class DegenerateWindowError(ValueError):
    """A window carries no usable variation for the requested measure."""


class MeasureKind(str, enum.Enum):
    PEARSON = "pearson"
    SPEARMAN = "spearman"
    KENDALL = "kendall"
    GC = "gc"
    MI = "mi"
    TE = "te"

    @classmethod
    def parse(cls, name: "str | MeasureKind") -> "MeasureKind":
        if isinstance(name, MeasureKind):
            return name
        try:
            return cls(name)
        except ValueError:
            raise ValueError(
                f"unknown measure {name!r}; valid names: {'|'.join(k.value for k in cls)}"
            ) from None

    @property
    def symmetric(self) -> bool:
        return self in _SYMMETRIC

    @property
    def linear(self) -> bool:
        """Correlation family; the only kinds allowed more than one diffusion step."""
        return self in _LINEAR


_SYMMETRIC = frozenset({MeasureKind.PEARSON, MeasureKind.SPEARMAN, MeasureKind.KENDALL, MeasureKind.MI})
_LINEAR = frozenset({MeasureKind.PEARSON, MeasureKind.SPEARMAN, MeasureKind.KENDALL})


@dataclass(frozen=True)
class WelchConfig:
    """Spectral settings for Geweke causality. ``segment_length=None`` means half the window."""

    segment_length: int | None = None
    overlap: float = 0.5
    window_function: str = "hann"
    var_order: int = 1

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap {self.overlap} must lie in [0, 1)")
        if self.var_order < 1:
            raise ValueError("var_order must be >= 1")
        if self.segment_length is not None and self.segment_length < 2:
            raise ValueError("segment_length must be >= 2")

    def nperseg(self, n: int) -> int:
        return self.segment_length if self.segment_length is not None else n // 2


def sturges_bins(n: int) -> int:
    return max(2, math.ceil(math.log2(n)) + 1)


@dataclass(frozen=True)
class MeasureSpec:
    kind: MeasureKind
    window: int
    bins: int | None = None
    spectral: WelchConfig = field(default_factory=WelchConfig)
    allow_small_window: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", MeasureKind.parse(self.kind))
        if self.window < MIN_WINDOW and not self.allow_small_window:
            raise ValueError(f"window {self.window} is below the minimum of {MIN_WINDOW}")
        if self.window < 3:
            raise ValueError("window must be >= 3")
        if self.bins is not None and self.bins < 2:
            raise ValueError("bins must be >= 2")
        seg = self.spectral.segment_length
        if self.kind is MeasureKind.GC and seg is not None and seg > self.window:
            raise ValueError(f"segment_length {seg} exceeds window {self.window}")

    @property
    def n_bins(self) -> int:
        return self.bins if self.bins is not None else sturges_bins(self.window)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "window": self.window,
            "bins": self.bins,
            "spectral": {
                "segment_length": self.spectral.segment_length,
                "overlap": self.spectral.overlap,
                "window_function": self.spectral.window_function,
                "var_order": self.spectral.var_order,
            },
        }


@dataclass(frozen=True)
class WindowPair:
    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.float64)
        dst = np.asarray(self.dst, dtype=np.float64)
        if src.ndim != 1 or src.shape != dst.shape:
            raise ValueError(f"window pair needs equal-length vectors, got {src.shape} and {dst.shape}")
        if not (np.isfinite(src).all() and np.isfinite(dst).all()):
            raise ValueError("window pair contains non-finite values")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)

    def __len__(self):
        return self.src.size


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"need equal-length vectors, got {x.shape} and {y.shape}")
    return x, y


def _is_constant(x: np.ndarray) -> bool:
    return bool((x == x[0]).all()) if x.size else True


# --- correlation family -------------------------------------------------------


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    if _is_constant(x) or _is_constant(y):
        raise DegenerateWindowError("pearson: zero variance window")
    xm = x - x.mean()
    ym = y - y.mean()
    r = np.dot(xm, ym) / (math.sqrt(np.dot(xm, xm)) * math.sqrt(np.dot(ym, ym)))
    return float(min(1.0, max(-1.0, r)))


def rank(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # start index of each run of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    return pearson(rank(x), rank(y))


def kendall(x, y) -> float:
    """Kendall tau-a: (concordant - discordant) / (n(n-1)/2); tied pairs count in neither."""
    x, y = _pair(x, y)
    n = x.size
    if n < 2:
        raise ValueError("kendall needs at least two observations")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    prod = np.triu(sx * sy, k=1)
    c = int(np.count_nonzero(prod > 0))
    d = int(np.count_nonzero(prod < 0))
    return (c - d) / (0.5 * n * (n - 1))


# --- information-theoretic --------------------------------------------------------


def bin_codes(x, bins: int) -> np.ndarray:
    """Equal-width bin index over [min(x), max(x)], same edge rule as ``np.histogram``."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if lo == hi:
        return np.zeros(x.size, dtype=np.int64)
    edges = np.linspace(lo, hi, bins + 1)
    codes = np.searchsorted(edges, x, side="right") - 1
    return np.minimum(codes, bins - 1)


def _entropy_from_counts(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log2(p)).sum())


def entropy(x, bins: int) -> float:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    codes = bin_codes(x, bins)
    return _entropy_from_counts(np.bincount(codes, minlength=bins), codes.size)


def joint_entropy(x, y, bins: int) -> float:
    x, y = _pair(x, y)
    codes = bin_codes(x, bins) * bins + bin_codes(y, bins)
    return _entropy_from_counts(np.bincount(codes, minlength=bins * bins), codes.size)


def nmi(x, y, bins: int) -> float:
    """Mutual information divided by the smaller marginal entropy, in [0, 1]."""
    x, y = _pair(x, y)
    hx, hy = entropy(x, bins), entropy(y, bins)
    if min(hx, hy) == 0.0:
        raise DegenerateWindowError("nmi: constant window has zero entropy")
    mi = hx + hy - joint_entropy(x, y, bins)
    return float(min(1.0, max(0.0, mi / min(hx, hy))))


def transfer_entropy(src, dst, bins: int) -> float:
    """Plug-in transfer entropy src -> dst with one step of history on each side."""
    src, dst = _pair(src, dst)
    if src.size < 3:
        raise ValueError("transfer entropy needs a window of at least 3")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    cx = bin_codes(src, bins)
    cy = bin_codes(dst, bins)
    fut, past, cause = cy[1:], cy[:-1], cx[:-1]
    n = fut.size

    triple = (fut * bins + past) * bins + cause
    keys, n_xyz = np.unique(triple, return_counts=True)
    k_fut = keys // (bins * bins)
    k_past = (keys // bins) % bins
    k_cause = keys % bins

    n_fp = np.bincount(fut * bins + past, minlength=bins * bins)[k_fut * bins + k_past]
    n_pc = np.bincount(past * bins + cause, minlength=bins * bins)[k_past * bins + k_cause]
    n_p = np.bincount(past, minlength=bins)[k_past]

    te = np.sum(n_xyz / n * np.log2((n_xyz * n_p) / (n_fp * n_pc)))
    return float(max(0.0, te))


# --- spectral Granger causality -----------------------------------------------------


def _lagged_design(src: np.ndarray, dst: np.ndarray, p: int):
    n = dst.size
    cols = [np.ones(n - p)]
    cols += [dst[p - lag : n - lag] for lag in range(1, p + 1)]
    cols += [src[p - lag : n - lag] for lag in range(1, p + 1)]
    return np.column_stack(cols), dst[p:]


def granger_geweke(src, dst, cfg: WelchConfig | None = None) -> float:
    """Frequency-averaged Geweke causality src -> dst (nats), clamped at 0.

    The conditional spectrum is the Welch spectrum of the residuals from the
    least-squares regression of dst on ``var_order`` lags of itself and of src.
    """
    src, dst = _pair(src, dst)
    cfg = cfg or WelchConfig()
    n, p = dst.size, cfg.var_order
    if _is_constant(dst):
        raise DegenerateWindowError("gc: constant effect window has zero spectrum")
    nperseg = cfg.nperseg(n)
    if nperseg < 2 or nperseg > n - p:
        raise ValueError(f"gc: segment length {nperseg} unusable for window {n} with order {p}")
    if n < 2 * nperseg * (1 - cfg.overlap):
        raise ValueError("gc: window too short for two Welch segments")
    noverlap = int(nperseg * cfg.overlap)

    X, y = _lagged_design(src, dst, p)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DegenerateWindowError("gc: lag regression matrix is singular")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta

    kw = dict(nperseg=nperseg, noverlap=noverlap, window=cfg.window_function)
    _, s_full = signal.welch(dst, **kw)
    _, s_cond = signal.welch(resid, **kw)
    if not (s_cond > 0).all() or not (s_full > 0).all():
        raise DegenerateWindowError("gc: vanishing spectral density")
    return float(max(0.0, np.mean(np.log(s_full / s_cond))))


# --- dispatch ---------------------------------------------------------------------------


def raw_measure(spec: MeasureSpec, src: np.ndarray, dst: np.ndarray) -> float:
    """Signed measure value; raises on degenerate windows."""
    kind = spec.kind
    if kind is MeasureKind.PEARSON:
        return pearson(src, dst)
    if kind is MeasureKind.SPEARMAN:
        return spearman(src, dst)
    if kind is MeasureKind.KENDALL:
        return kendall(src, dst)
    if kind is MeasureKind.MI:
        return nmi(src, dst, spec.n_bins)
    if kind is MeasureKind.TE:
        return transfer_entropy(src, dst, spec.n_bins)
    if kind is MeasureKind.GC:
        return granger_geweke(src, dst, spec.spectral)
    raise AssertionError(kind)


def measure(spec: MeasureSpec, pair: WindowPair) -> float:
    """Nonnegative edge weight |m(src, dst)|.

    Degenerate windows give 0 and a logged warning so one flat stretch of data
    does not abort a whole graph build; call the measure directly to get the error.
    """
    if len(pair) != spec.window:
        raise ValueError(f"window pair has length {len(pair)}, spec expects {spec.window}")
    try:
        value = raw_measure(spec, pair.src, pair.dst)
    except DegenerateWindowError as exc:
        logger.warning("degenerate window, weight set to 0: %s", exc)
        return 0.0
    return abs(value)
