"""Seeded VAR(1) generators with known directed coupling.

``coupling[i, j]`` is the effect of feature ``i`` at ``t-1`` on feature ``j`` at ``t``:
``x_t = coupling.T @ x_{t-1} + noise``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataproc import TimeSeriesFrame, write_frame


class UnstableCouplingError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_features: int
    length: int
    coupling: np.ndarray | None = None
    noise_scale: float = 1.0
    regimes: tuple = ()  # ((start, matrix), ...); first start must be 0
    seed: int = 0
    burn_in: int = 100

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.length < 10 * self.n_features:
            raise ValueError(f"length {self.length} < 10 * n_features ({10 * self.n_features})")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        shape = (self.n_features, self.n_features)
        if self.coupling is not None:
            object.__setattr__(self, "coupling", _check_matrix(self.coupling, shape))
        regimes = tuple((int(s), _check_matrix(m, shape)) for s, m in self.regimes)
        starts = [s for s, _ in regimes]
        if regimes:
            if starts[0] != 0:
                raise ValueError("the first regime must start at index 0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ValueError(f"regime starts must be strictly increasing, got {starts}")
            if starts[-1] >= self.length:
                raise ValueError(f"regime start {starts[-1]} is beyond length {self.length}")
        object.__setattr__(self, "regimes", regimes)

    def matrix(self) -> np.ndarray:
        return self.coupling if self.coupling is not None else np.zeros((self.n_features,) * 2)


def _check_matrix(m, shape) -> np.ndarray:
    m = np.array(m, dtype=np.float64)
    if m.shape != shape:
        raise ValueError(f"coupling matrix shape {m.shape}, expected {shape}")
    if not np.isfinite(m).all():
        raise ValueError("coupling matrix must be finite")
    radius = float(np.max(np.abs(np.linalg.eigvals(m))))
    if radius >= 1.0:
        raise UnstableCouplingError(f"coupling spectral radius {radius:.4g} >= 1")
    m.setflags(write=False)
    return m


def pair_coupling(n_features: int, src: int, dst: int, strength: float) -> np.ndarray:
    c = np.zeros((n_features, n_features))
    c[src, dst] = strength
    return c


def _simulate(cfg: SynthConfig, schedule: list[tuple[int, np.ndarray]]) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    n, total = cfg.n_features, cfg.burn_in + cfg.length
    noise = rng.standard_normal((total, n)) * cfg.noise_scale
    x = np.empty((total, n))
    x[0] = noise[0]
    bounds = [s + cfg.burn_in for s, _ in schedule[1:]] + [total]
    mats = [m for _, m in schedule]
    k = 0
    for t in range(1, total):
        while t >= bounds[k]:
            k += 1
        x[t] = mats[k].T @ x[t - 1] + noise[t]
    return x[cfg.burn_in :]


def _frame(cfg: SynthConfig, values: np.ndarray, truth: dict) -> TimeSeriesFrame:
    names = tuple(f"x{j + 1}" for j in range(cfg.n_features))
    stamps = tuple(str(t) for t in range(cfg.length))
    return TimeSeriesFrame(stamps, names, values, None, {"ground_truth": truth})


def gen_coupled(cfg: SynthConfig) -> TimeSeriesFrame:
    c = cfg.matrix()
    values = _simulate(cfg, [(0, c)])
    truth = {"kind": "coupled", "seed": cfg.seed, "noise_scale": cfg.noise_scale,
             "burn_in": cfg.burn_in, "coupling": c.tolist()}
    return _frame(cfg, values, truth)


def gen_regime_switching(cfg: SynthConfig) -> TimeSeriesFrame:
    """Coupling switches at each scheduled start; the burn-in runs under the first regime.

    A one-regime schedule reproduces :func:`gen_coupled` with that matrix.
    """
    if not cfg.regimes:
        raise ValueError("regime schedule is empty")
    values = _simulate(cfg, list(cfg.regimes))
    truth = {"kind": "regime_switching", "seed": cfg.seed, "noise_scale": cfg.noise_scale,
             "burn_in": cfg.burn_in,
             "regimes": [{"start": s, "coupling": m.tolist()} for s, m in cfg.regimes]}
    return _frame(cfg, values, truth)


def truth_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".truth.json")


def write_synth(frame: TimeSeriesFrame, csv_path: str | Path) -> Path:
    """CSV in the loader's format plus a ``<stem>.truth.json`` sidecar."""
    write_frame(frame, csv_path)
    side = truth_path(csv_path)
    side.write_text(json.dumps(frame.meta.get("ground_truth", {}), indent=2, sort_keys=True) + "\n")
    return side


def config_from_dict(d: dict) -> SynthConfig:
    """Build from a parsed JSON/YAML mapping (matrices as nested lists)."""
    d = dict(d)
    regimes = tuple((r["start"], r["coupling"]) for r in d.pop("regimes", []) or [])
    known = {"n_features", "length", "coupling", "noise_scale", "seed", "burn_in"}
    extra = set(d) - known - {"kind"}
    if extra:
        raise ValueError(f"unknown synth config keys {sorted(extra)}")
    d.pop("kind", None)
    return SynthConfig(regimes=regimes, **d)


def generate(d: dict) -> TimeSeriesFrame:
    kind = d.get("kind", "regime_switching" if d.get("regimes") else "coupled")
    cfg = config_from_dict(d)
    if kind == "coupled":
        return gen_coupled(cfg)
    if kind == "regime_switching":
        return gen_regime_switching(cfg)
    raise ValueError(f"unknown generator {kind!r}; expected coupled or regime_switching")
