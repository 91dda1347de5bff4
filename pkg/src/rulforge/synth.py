"""Seeded synthetic cycling data with LFP-like capacity fade.

Each cell fades as ``Q_max(i) = Q0 * (1 - a * (i / L) ** b) + noise`` and
reaches end of life at the first cycle where ``Q_max <= 0.8 * Q0``. A cycle
is a CC-CV charge followed by a CC-CV discharge; the per-cell life scale
``L`` is tied to the cycling protocol (the charge rate in the
``fast_charge`` variant, the discharge rate in ``multi_discharge``) so the
protocol is visible in the current statistics, as in real fast-charging
studies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import RUL_SCALE, CellHistory
from .errors import ConfigError
from .preprocess import RawCycleSignals

NOMINAL_CAPACITY = 1.1  # Ah
EOL_FRACTION = 0.8
VARIANTS = ("fast_charge", "multi_discharge")


@dataclass(frozen=True)
class SynthConfig:
    n_cells: int = 8
    seed: int = 0
    life_min: float = 150.0
    life_max: float = 500.0
    fade_a: float = 0.2
    fade_b_min: float = 1.0
    fade_b_max: float = 2.0
    capacity_noise: float = 0.001   # std of Q_max noise, fraction of Q0
    signal_noise: float = 1.0       # multiplier on measurement noise
    points_per_cycle: int = 128
    variant: str = "fast_charge"
    prefix: str = "cell"

    def __post_init__(self):
        if self.n_cells < 1:
            raise ConfigError("n_cells must be >= 1")
        if not 0 < self.life_min <= self.life_max:
            raise ConfigError("need 0 < life_min <= life_max")
        if self.fade_a <= 0 or not 0 < self.fade_b_min <= self.fade_b_max:
            raise ConfigError("fade parameters must be positive with b_min <= b_max")
        if self.capacity_noise < 0 or self.signal_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.points_per_cycle < 64:
            raise ConfigError("points_per_cycle must be >= 64")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")


def _ocv(soc: np.ndarray, shift: float) -> np.ndarray:
    """Open-circuit voltage with two plateau steps (graphite staging)."""
    return (3.05 + 0.25 * soc
            + 0.06 * np.tanh((soc - 0.25 - shift) / 0.04)
            + 0.05 * np.tanh((soc - 0.62 - shift) / 0.05)
            - 0.25 * np.exp(-soc / 0.03))


def _charge(q_max, rate, resistance, shift, n):
    q = q_max * np.linspace(0.0, 1.0, n)
    i_cc = rate * NOMINAL_CAPACITY
    cv = q > 0.8 * q_max
    frac = np.clip((q - 0.8 * q_max) / (0.2 * q_max), 0.0, 1.0)
    current = np.where(cv, i_cc * (1.0 - 0.95 * frac), i_cc)
    volts = np.minimum(_ocv(q / NOMINAL_CAPACITY, shift) + current * resistance, 3.6)
    volts = np.where(cv, 3.6, volts)
    return q, current, volts


def _discharge(q_max, rate, resistance, n):
    q = q_max * np.linspace(0.0, 1.0, n)
    i_cc = -rate * NOMINAL_CAPACITY
    s = q / q_max
    cv = s > 0.9
    frac = np.clip((s - 0.9) / 0.1, 0.0, 1.0)
    current = np.where(cv, i_cc * (1.0 - 0.98 * frac), i_cc)
    gamma = 8.0
    sag = 0.9 * np.expm1(gamma * s) / math.expm1(gamma)
    volts = 3.3 - 0.3 * s - sag + current * resistance
    volts = np.where(cv, 2.0, np.maximum(volts, 2.0))
    return q, current, volts


def _cycle(rng, q_max, fade, charge_rate, discharge_rate, cfg: SynthConfig) -> RawCycleSignals:
    n_c = cfg.points_per_cycle // 2
    n_d = cfg.points_per_cycle - n_c
    resistance = 0.02 * (1.0 + 1.5 * fade)
    shift = 0.2 * fade
    qc, ic, vc = _charge(q_max, charge_rate, resistance, shift, n_c)
    qd, idis, vd = _discharge(q_max, discharge_rate, resistance, n_d)

    def times(q, current, t0):
        dq = np.diff(q, prepend=q[0])
        dt = np.where(dq > 0, dq / np.maximum(np.abs(current), 1e-3) * 3600.0, 1.0)
        return t0 + np.cumsum(dt)

    tc = times(qc, ic, 0.0)
    td = times(qd, idis, tc[-1] + 60.0)
    s = cfg.signal_noise
    I = np.concatenate([ic, idis]) + s * rng.normal(0.0, 2e-3, cfg.points_per_cycle)
    V = np.concatenate([vc, vd]) + s * rng.normal(0.0, 1e-3, cfg.points_per_cycle)
    Q = np.concatenate([qc, qd]) + s * rng.normal(0.0, 2e-4, cfg.points_per_cycle)
    discharge = np.r_[np.zeros(n_c, bool), np.ones(n_d, bool)]
    return RawCycleSignals(np.concatenate([tc, td]), I, V, Q, discharge)


def eol_cycle(life_scale: float, a: float, b: float, noise: np.ndarray | None = None) -> int:
    """First cycle at which ``Q_max / Q0 <= 0.8`` (noise in units of Q0)."""
    for i in range(1, RUL_SCALE):
        fade = a * (i / life_scale) ** b
        if noise is not None:
            fade -= noise[i - 1]
        if fade >= (1.0 - EOL_FRACTION) - 1e-12:
            return i
    raise ConfigError(f"cell does not reach end of life before cycle {RUL_SCALE}")


def synthesize_cells(cfg: SynthConfig = SynthConfig()) -> list[CellHistory]:
    cells = []
    for k in range(cfg.n_cells):
        rng = np.random.default_rng([cfg.seed, k])
        u = rng.uniform()
        life_scale = cfg.life_min + u * (cfg.life_max - cfg.life_min)
        b = rng.uniform(cfg.fade_b_min, cfg.fade_b_max)
        noise = cfg.capacity_noise * rng.normal(size=RUL_SCALE)
        life = eol_cycle(life_scale, cfg.fade_a, b, noise)
        # longer-lived cells see gentler protocols
        fast = 6.0 - 2.4 * u + rng.normal(0.0, 0.05)
        if cfg.variant == "fast_charge":
            charge_rate, discharge_rate = fast, 4.0
        else:
            charge_rate, discharge_rate = 3.0, fast - 1.0
        cycles = []
        for i in range(1, life + 1):
            fade = cfg.fade_a * (i / life_scale) ** b - noise[i - 1]
            q_max = NOMINAL_CAPACITY * (1.0 - fade)
            cycles.append(_cycle(rng, q_max, fade, charge_rate, discharge_rate, cfg))
        cells.append(CellHistory(f"{cfg.prefix}{k:02d}", cycles, life, NOMINAL_CAPACITY))
    return cells
