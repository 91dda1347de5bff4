"""Per-cycle signal preprocessing and windowed sample assembly.

Pipeline for one cycle: interpolate discharge capacity onto an evenly spaced
current grid, denoise I, V, Q and the interpolated capacity, reduce each to six
summary statistics, and replace the capacity-curve statistics by their change
over ``delta`` cycles. A training sample stacks ten such 4x6 matrices taken
every third cycle from a 30-cycle window ending at the current cycle.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import (ConfigError, ContractError, DegenerateRangeError,
                     InsufficientDataError, WindowBoundsError)

ROW_NAMES = ("I", "V", "Q", "dQ")
STAT_NAMES = ("mean", "std", "min", "max", "variance", "median")
DENOISE_METHODS = ("savitzky_golay", "gaussian", "none")


@dataclass(frozen=True)
class RawCycleSignals:
    """One charge-discharge cycle: time (s), current (A), voltage (V), capacity (Ah).

    ``discharge`` optionally marks which samples belong to the discharge phase.
    """
    t: np.ndarray
    I: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    discharge: np.ndarray | None = None

    def __post_init__(self):
        for name in ("t", "I", "V", "Q"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.t)
        if not (len(self.I) == len(self.V) == len(self.Q) == n):
            raise ContractError("cycle series must share one length")
        if n < 8:
            raise InsufficientDataError(f"cycle has {n} samples, need at least 8")
        if np.any(np.diff(self.t) <= 0):
            raise ContractError("cycle time stamps must be strictly increasing")
        if self.discharge is not None:
            mask = np.asarray(self.discharge, dtype=bool)
            if mask.shape != (n,):
                raise ContractError("discharge mask must match the series length")
            object.__setattr__(self, "discharge", mask)

    def __len__(self):
        return len(self.t)


class DerivedCapacity(NamedTuple):
    grid_I: np.ndarray
    Qdot: np.ndarray


class FeatureVector6(NamedTuple):
    mean: float
    std: float
    min: float
    max: float
    variance: float
    median: float


@dataclass(frozen=True)
class DenoiseConfig:
    method: str = "savitzky_golay"
    window: int = 191
    polyorder: int = 3
    gaussian_sigma: float | None = None

    def __post_init__(self):
        if self.method not in DENOISE_METHODS:
            raise ConfigError(f"unknown denoise method {self.method!r}; choose from {DENOISE_METHODS}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"denoise window must be a positive odd integer, got {self.window}")
        if self.polyorder < 0 or self.polyorder >= self.window:
            raise ConfigError(f"polyorder must satisfy 0 <= polyorder < window, got {self.polyorder}")
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be positive")


@dataclass(frozen=True)
class PrepConfig:
    """Sample-construction settings.

    ``window`` is the span of recent cycles a sample covers; ``stride`` the
    spacing between the ``n_selected`` cycles taken from it. ``features``
    names the rows kept; excluded rows are zeroed.
    """
    delta: int = 9
    window: int = 30
    n_selected: int = 10
    stride: int = 3
    grid_size: int = 1000
    sample_stride: int = 1
    features: str = "I+V+Q+dQ"
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)

    def __post_init__(self):
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if self.n_selected < 1 or self.stride < 1 or self.sample_stride < 1:
            raise ConfigError("n_selected, stride and sample_stride must be >= 1")
        if self.stride * (self.n_selected - 1) + 1 > self.window:
            raise ConfigError("n_selected cycles at this stride do not fit in the window")
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2")
        feature_rows(self.features)

    @property
    def min_valid_index(self) -> int:
        return max(self.window, self.stride * (self.n_selected - 1) + self.delta + 1)


def feature_rows(text: str) -> tuple[bool, bool, bool, bool]:
    """Parse ``"I+V+Q+dQ"``-style row selections into a keep-mask."""
    names = [s.strip() for s in text.split("+") if s.strip()]
    unknown = [n for n in names if n not in ROW_NAMES]
    if unknown or not names:
        raise ConfigError(f"bad feature set {text!r}; use '+'-joined names from {ROW_NAMES}")
    return tuple(name in names for name in ROW_NAMES)


# ---------------------------------------------------------------------------
# capacity derivative tracking


def _mean_by_key(x: np.ndarray, y: np.ndarray):
    """Sort (x, y) pairs and average y over repeated x; order-independent."""
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    uniq, start, counts = np.unique(xs, return_index=True, return_counts=True)
    sums = np.add.reduceat(ys, start)
    return uniq, sums / counts


def capacity_derivative_tracking(I, Q, grid_size: int = 1000) -> DerivedCapacity:
    """Interpolate capacity onto ``grid_size`` evenly spaced current values."""
    I = np.asarray(I, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if I.shape != Q.shape:
        raise ContractError(f"current and capacity lengths differ: {I.shape} vs {Q.shape}")
    if I.size < 2:
        raise InsufficientDataError("capacity derivative tracking needs at least 2 points")
    lo, hi = I.min(), I.max()
    if not hi > lo:
        raise DegenerateRangeError("current series is constant; no interpolation range")
    xs, ys = _mean_by_key(I, Q)
    grid = np.linspace(lo, hi, grid_size)
    return DerivedCapacity(grid, np.interp(grid, xs, ys))


# ---------------------------------------------------------------------------
# denoising


def _effective_window(n: int, window: int, polyorder: int) -> tuple[int, int]:
    if window > n:
        window = n if n % 2 else n - 1
    return window, min(polyorder, window - 1)


@functools.lru_cache(maxsize=4096)
def _sg_weights(left: int, right: int, polyorder: int) -> np.ndarray:
    """Weights that evaluate, at offset 0, the least-squares polynomial over
    offsets ``-left..right``."""
    z = np.arange(-left, right + 1, dtype=np.float64)
    order = min(polyorder, len(z) - 1)
    scale = max(left, right, 1)
    A = np.vander(z / scale, order + 1, increasing=True)
    w = np.linalg.pinv(A)[0]
    w.setflags(write=False)
    return w


@functools.lru_cache(maxsize=256)
def _sg_edge_matrices(window: int, polyorder: int):
    half = window // 2
    left = np.zeros((half, window))
    right = np.zeros((half, window))
    for m in range(half):
        left[m, :m + half + 1] = _sg_weights(m, half, polyorder)
        # right edge point sits m samples before the end
        right[half - 1 - m, window - (m + half + 1):] = _sg_weights(half, m, polyorder)
    left.setflags(write=False)
    right.setflags(write=False)
    return left, right


def savgol_smooth(x, window: int = 191, polyorder: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing with truncated-window fits at the edges.

    Each output sample is the value at that sample of the order-``polyorder``
    least-squares polynomial over the centred window, clipped to the signal
    bounds near the ends. A window longer than the signal shrinks to the
    largest odd length that fits.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n == 0:
        raise InsufficientDataError("cannot smooth an empty series")
    window, polyorder = _effective_window(n, window, polyorder)
    if window <= 1:
        return x.copy()
    half = window // 2
    out = np.empty(n)
    out[half:n - half] = np.correlate(x, _sg_weights(half, half, polyorder), mode="valid")
    left, right = _sg_edge_matrices(window, polyorder)
    out[:half] = left @ x[:window]
    out[n - half:] = right @ x[n - window:]
    return out


def gaussian_smooth(x, window: int = 191, sigma: float | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    window, _ = _effective_window(x.size, window, 0)
    if window <= 1:
        return x.copy()
    sigma = sigma if sigma is not None else window / 6.0
    radius = window // 2
    return gaussian_filter1d(x, sigma, mode="reflect", truncate=radius / sigma)


def denoise(x, cfg: DenoiseConfig = DenoiseConfig()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise InsufficientDataError("denoise needs at least 2 samples")
    if cfg.method == "savitzky_golay":
        return savgol_smooth(x, cfg.window, cfg.polyorder)
    if cfg.method == "gaussian":
        return gaussian_smooth(x, cfg.window, cfg.gaussian_sigma)
    return x.copy()


# ---------------------------------------------------------------------------
# features


def statistical_features(x) -> FeatureVector6:
    """Mean, std, min, max, variance and median (population moments)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InsufficientDataError("statistical features of an empty series")
    var = float(np.var(x))
    return FeatureVector6(float(np.mean(x)), float(np.sqrt(var)), float(np.min(x)),
                          float(np.max(x)), var, float(np.median(x)))


def delta_features(now, past) -> np.ndarray:
    return np.asarray(now, dtype=np.float64) - np.asarray(past, dtype=np.float64)


def derived_capacity(cycle: RawCycleSignals, grid_size: int = 1000) -> DerivedCapacity:
    """Capacity derivative tracking over the discharge phase when one is
    marked (and spans a current range), else over the full cycle."""
    mask = cycle.discharge
    if mask is not None and mask.sum() >= 2:
        I, Q = cycle.I[mask], cycle.Q[mask]
        if I.max() > I.min():
            return capacity_derivative_tracking(I, Q, grid_size)
    return capacity_derivative_tracking(cycle.I, cycle.Q, grid_size)


def cycle_statistics(cycle: RawCycleSignals, cfg: DenoiseConfig = DenoiseConfig(),
                     grid_size: int = 1000) -> np.ndarray:
    """4x6 statistics of the denoised I, V, Q and derived-capacity signals."""
    qdot = derived_capacity(cycle, grid_size).Qdot
    signals = (cycle.I, cycle.V, cycle.Q, qdot)
    return np.array([statistical_features(denoise(s, cfg)) for s in signals])


def fuse_cycle(cycle: RawCycleSignals, past_qdot_features, cfg: DenoiseConfig = DenoiseConfig(),
               grid_size: int = 1000) -> np.ndarray:
    """Rows ``[F(I), F(V), F(Q), F(Qdot) - past]`` for one cycle."""
    stats = cycle_statistics(cycle, cfg, grid_size)
    stats[3] = delta_features(stats[3], past_qdot_features)
    return stats


def selected_cycles(i: int, prep: PrepConfig = PrepConfig()) -> list[int]:
    """1-based cycle indices feeding the sample at cycle ``i``, oldest first."""
    if i < prep.min_valid_index:
        raise WindowBoundsError(
            f"cycle {i} is too early for a sample: minimum valid index is {prep.min_valid_index} "
            f"(window {prep.window}, stride {prep.stride}, delta {prep.delta})",
            prep.min_valid_index)
    return [i - prep.stride * (prep.n_selected - 1 - k) for k in range(prep.n_selected)]


def assemble_sample(stats: np.ndarray, i: int, prep: PrepConfig = PrepConfig()) -> np.ndarray:
    """Build the ``(n_selected, 4, 6)`` sample at cycle ``i`` from per-cycle
    statistics ``stats[j - 1]`` (the output of :func:`cycle_statistics`)."""
    if i > len(stats):
        raise WindowBoundsError(f"cycle {i} beyond the {len(stats)} recorded cycles",
                                prep.min_valid_index)
    idx = np.array(selected_cycles(i, prep)) - 1
    sample = stats[idx].copy()
    sample[:, 3] = stats[idx, 3] - stats[idx - prep.delta, 3]
    keep = np.array(feature_rows(prep.features))
    sample[:, ~keep] = 0.0
    return sample


def build_sample(cycles: Sequence[RawCycleSignals], i: int, prep: PrepConfig = PrepConfig()) -> np.ndarray:
    """Sample tensor at 1-based cycle ``i``; only touches the cycles it needs."""
    if i > len(cycles):
        raise WindowBoundsError(f"cycle {i} beyond the {len(cycles)} recorded cycles",
                                prep.min_valid_index)
    chosen = selected_cycles(i, prep)
    needed = sorted(set(chosen) | {j - prep.delta for j in chosen})
    stats = np.zeros((i, 4, 6))
    for j in needed:
        stats[j - 1] = cycle_statistics(cycles[j - 1], prep.denoise, prep.grid_size)
    return assemble_sample(stats, i, prep)


# ---------------------------------------------------------------------------
# incremental capacity


def incremental_capacity_curve(V, Q, cfg: DenoiseConfig = DenoiseConfig()):
    """Smoothed dQ/dV against voltage.

    Samples are sorted by voltage (repeated voltages averaged), Q is denoised
    along that axis, differentiated with second-order finite differences and
    the derivative is denoised again. Returns ``(voltage, dqdv)``.
    """
    V = np.asarray(V, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if V.shape != Q.shape:
        raise ContractError("voltage and capacity lengths differ")
    volts, caps = _mean_by_key(V, Q) if V.size else (V, Q)
    if volts.size < 3:
        raise InsufficientDataError("incremental capacity needs at least 3 distinct voltages")
    smooth_q = denoise(caps, cfg)
    dqdv = np.gradient(smooth_q, volts, edge_order=2)
    return volts, denoise(dqdv, cfg)
