"""Renewable-energy Markov model and ingestion of solar / wholesale series.

Renewable output is discretized into equal-width levels on [0, u_max]; level
values are bin midpoints.  Hour-dependent transition matrices are estimated
from historical daily trajectories by transition counting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError


@dataclass(frozen=True)
class MarkovChain:
    """Level values (MWh) plus one row-stochastic transition matrix per hour.

    ``transitions[k][i][j]`` is the probability of moving from level i+1 at
    hour k+1 to level j+1 at the next hour (the last matrix wraps to the
    next day's first hour).
    """
    level_values: np.ndarray          # (D,)
    transitions: np.ndarray           # (K, D, D)

    def __post_init__(self):
        object.__setattr__(self, "level_values", np.asarray(self.level_values, dtype=float))
        object.__setattr__(self, "transitions", np.asarray(self.transitions, dtype=float))
        t = self.transitions
        if t.ndim != 3 or t.shape[1] != t.shape[2] or t.shape[1] != len(self.level_values):
            raise ValueError(f"transition stack has shape {t.shape}, expected (K, D, D)")
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        rows = t.sum(axis=2)
        if not np.allclose(rows, 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")

    @property
    def n_levels(self) -> int:
        return len(self.level_values)

    @property
    def horizons(self) -> int:
        return self.transitions.shape[0]

    def value(self, level: int) -> float:
        return float(self.level_values[level - 1])


def quantize_levels(u_max: float, d_levels: int) -> np.ndarray:
    """Midpoints of an equal-width partition of [0, u_max]."""
    if d_levels < 1:
        raise ValueError("need at least one level")
    if u_max < 0:
        raise ValueError("u_max must be nonnegative")
    width = u_max / d_levels if u_max > 0 else 0.0
    return np.array([(i + 0.5) * width for i in range(d_levels)])


def level_of(value: float, u_max: float, d_levels: int) -> int:
    """1-based level index of an energy value under the equal-width scheme."""
    if u_max <= 0:
        return 1
    idx = int(np.floor(value / u_max * d_levels))
    return int(np.clip(idx, 0, d_levels - 1)) + 1


def estimate_transitions(history, d_levels: int, horizons: int) -> np.ndarray:
    """Hourly transition matrices counted from daily level trajectories.

    ``history`` is (n_days, horizons) of 1-based levels.  Hour k's matrix is
    estimated from the k -> k+1 pairs; the final hour uses the wrap to the
    next day's first hour.  Rows with no observations fall back to uniform.
    """
    history = np.asarray(history, dtype=int)
    if history.size == 0:
        raise EstimationError("empty level history")
    if history.ndim != 2 or history.shape[1] != horizons:
        raise EstimationError(f"history must be (n_days, {horizons}), got {history.shape}")
    if np.any(history < 1) or np.any(history > d_levels):
        raise EstimationError("levels out of range")
    n_days = history.shape[0]
    counts = np.zeros((horizons, d_levels, d_levels))
    for day in range(n_days):
        for k in range(horizons - 1):
            counts[k, history[day, k] - 1, history[day, k + 1] - 1] += 1.0
        if day + 1 < n_days:
            counts[horizons - 1, history[day, -1] - 1, history[day + 1, 0] - 1] += 1.0
    trans = np.empty_like(counts)
    for k in range(horizons):
        row_sums = counts[k].sum(axis=1, keepdims=True)
        uniform = np.full(d_levels, 1.0 / d_levels)
        trans[k] = np.where(row_sums > 0, counts[k] / np.where(row_sums > 0, row_sums, 1.0), uniform)
    return trans


def chain_from_energy_history(history_mwh, d_levels: int) -> MarkovChain:
    """Quantize an energy history (n_days, K) and estimate the chain."""
    history_mwh = np.asarray(history_mwh, dtype=float)
    if history_mwh.size == 0:
        raise EstimationError("empty energy history")
    u_max = float(history_mwh.max())
    horizons = history_mwh.shape[1]
    levels = np.array([[level_of(v, u_max, d_levels) for v in day] for day in history_mwh])
    return MarkovChain(level_values=quantize_levels(u_max, d_levels),
                       transitions=estimate_transitions(levels, d_levels, horizons))


def deterministic_chain(u_series) -> MarkovChain:
    """Chain that replays a fixed hourly energy series exactly.

    Levels are the distinct series values; every hour's matrix sends all
    levels to the next hour's value with probability one.
    """
    u_series = np.asarray(u_series, dtype=float)
    values = np.unique(u_series)
    d = len(values)
    k = len(u_series)
    idx = {v: i for i, v in enumerate(values)}
    trans = np.zeros((k, d, d))
    for h in range(k):
        nxt = idx[u_series[(h + 1) % k]]
        trans[h, :, nxt] = 1.0
    return MarkovChain(level_values=values, transitions=trans)


def expected_next(chain: MarkovChain, k: int, level: int, f) -> float:
    """Expectation of f(next level) one hour after hour k at the given level."""
    if not 1 <= level <= chain.n_levels:
        raise ValueError(f"level {level} out of range 1..{chain.n_levels}")
    row = chain.transitions[k - 1, level - 1]
    return float(sum(pj * f(j + 1) for j, pj in enumerate(row) if pj > 0.0))


def sample_path(chain: MarkovChain, start_level: int, rng: np.random.Generator) -> np.ndarray:
    """One day of levels (length K), starting from the given level at hour 1."""
    if not 1 <= start_level <= chain.n_levels:
        raise ValueError(f"level {start_level} out of range 1..{chain.n_levels}")
    levels = np.empty(chain.horizons, dtype=int)
    levels[0] = start_level
    for k in range(1, chain.horizons):
        row = chain.transitions[k - 1, levels[k - 1] - 1]
        levels[k] = rng.choice(chain.n_levels, p=row) + 1
    return levels


# ---------------------------------------------------------------------------
# exogenous series

@dataclass(frozen=True)
class SolarProfile:
    radiation_kw_m2: np.ndarray       # per horizon
    panel_area_m2: float
    efficiency: float

    def __post_init__(self):
        object.__setattr__(self, "radiation_kw_m2", np.asarray(self.radiation_kw_m2, dtype=float))
        if np.any(self.radiation_kw_m2 < 0):
            raise ValueError("solar radiation must be nonnegative")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("panel efficiency must be in (0, 1]")
        if self.panel_area_m2 < 0:
            raise ValueError("panel area must be nonnegative")


def solar_to_energy(profile: SolarProfile) -> np.ndarray:
    """Hourly energy yield in MWh (radiation kW/m2 x area x efficiency x 1 h)."""
    return profile.radiation_kw_m2 * profile.panel_area_m2 * profile.efficiency / 1000.0


@dataclass(frozen=True)
class PriceSeries:
    values: np.ndarray                # $/MWh per horizon

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("price series contains non-finite values")

    def __len__(self):
        return len(self.values)


def load_series_csv(path) -> np.ndarray:
    """Read a `horizon,value` CSV, returning values ordered by horizon."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["horizon", "value"]:
            raise EstimationError(f"{path}: expected header 'horizon,value'")
        for rec in reader:
            rows.append((int(rec["horizon"]), float(rec["value"])))
    if not rows:
        raise EstimationError(f"{path}: no data rows")
    rows.sort()
    return np.array([v for _, v in rows])


def load_history_csv(path) -> np.ndarray:
    """Read a `day,horizon,value` CSV into an (n_days, K) array."""
    by_day: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["day", "horizon", "value"]:
            raise EstimationError(f"{path}: expected header 'day,horizon,value'")
        for rec in reader:
            by_day.setdefault(int(rec["day"]), {})[int(rec["horizon"])] = float(rec["value"])
    if not by_day:
        raise EstimationError(f"{path}: no data rows")
    days = sorted(by_day)
    horizons = sorted(by_day[days[0]])
    out = np.empty((len(days), len(horizons)))
    for i, d in enumerate(days):
        if sorted(by_day[d]) != horizons:
            raise EstimationError(f"{path}: day {d} has inconsistent horizons")
        out[i] = [by_day[d][h] for h in horizons]
    return out
