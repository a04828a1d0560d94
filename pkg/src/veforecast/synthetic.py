"""Synthetic dataset generators for tests, demos and offline smoke runs.

The grouped task builds variate groups whose optimal projections differ by
construction, so a shared channel-independent projection is provably worse
than per-group experts. The benchmark stand-ins only reproduce the shapes and
rough scale of the public forecasting CSVs for pipeline tests; they carry
none of the real measurements.
"""

from __future__ import annotations

import csv

import numpy as np

from .data import TimeSeriesDataset
from .errors import ConfigError

GROUP_KINDS = ("sine", "sawtooth", "ar1")

# rows x channels of the public benchmark files, used for shape-true stand-ins
BENCHMARK_SHAPES = {
    "etth1": (17420, 7),
    "etth2": (17420, 7),
    "ecl": (26304, 321),
    "weather": (52696, 21),
}


def _sine(t: np.ndarray, phase: float, period: float) -> np.ndarray:
    return np.sin(2.0 * np.pi * (t + phase) / period)


def _sawtooth(t: np.ndarray, phase: float, period: float) -> np.ndarray:
    frac = np.mod(t + phase, period) / period
    return 2.0 * frac - 1.0


def _ar1(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    # innovation variance 1 - rho^2 keeps the process at unit variance
    noise = rng.normal(0.0, np.sqrt(1.0 - rho * rho), size=n + 100)
    out = np.empty(n + 100)
    out[0] = noise[0]
    for i in range(1, n + 100):
        out[i] = rho * out[i - 1] + noise[i]
    return out[100:]  # drop burn-in


def grouped_synthetic(
    n_steps: int = 4000,
    per_group: int = 4,
    period: float = 24.0,
    rho: float = 0.9,
    seed: int = 11,
) -> TimeSeriesDataset:
    """Three variate groups: sines, sawtooths (both period 24) and AR(1) noise.

    Group members differ only by phase (or by their noise stream), so each
    group shares one optimal projection while the groups' optima disagree.
    """
    if n_steps < 2 * period or per_group < 1:
        raise ConfigError(f"need n_steps >= {2 * period} and per_group >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    columns = []
    names = []
    for c in range(per_group):
        phase = period * c / per_group
        columns.append(_sine(t, phase, period))
        names.append(f"sine{c}")
    for c in range(per_group):
        phase = period * c / per_group
        columns.append(_sawtooth(t, phase, period))
        names.append(f"saw{c}")
    for c in range(per_group):
        columns.append(_ar1(n_steps, rho, rng))
        names.append(f"ar{c}")
    return TimeSeriesDataset(
        name="grouped-synthetic",
        values=np.stack(columns, axis=1),
        channel_names=tuple(names),
    )


def group_index(channel: int, per_group: int = 4) -> int:
    return channel // per_group


def benchmark_standin(name: str, seed: int = 0) -> TimeSeriesDataset:
    """A stand-in with the named benchmark's exact shape: daily cycle plus drift."""
    key = name.lower()
    if key not in BENCHMARK_SHAPES:
        raise ConfigError(f"unknown benchmark {name!r}, expected one of {sorted(BENCHMARK_SHAPES)}")
    rows, channels = BENCHMARK_SHAPES[key]
    rng = np.random.default_rng([seed, rows, channels])
    t = np.arange(rows, dtype=np.float64)
    amp = rng.uniform(0.5, 2.0, size=channels)
    phase = rng.uniform(0.0, 24.0, size=channels)
    daily = amp * np.sin(2.0 * np.pi * (t[:, None] + phase) / 24.0)
    drift = np.cumsum(rng.normal(0.0, 0.05, size=(rows, channels)), axis=0)
    noise = rng.normal(0.0, 0.1, size=(rows, channels))
    values = daily + drift + noise
    names = tuple(f"{key}_c{i}" for i in range(channels))
    return TimeSeriesDataset(name=key, values=values, channel_names=names, granularity="1h")


def write_csv(ds: TimeSeriesDataset, path) -> None:
    """Timestamp-labelled CSV in the layout the loader expects."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", *ds.channel_names])
        for i, row in enumerate(ds.values):
            writer.writerow([f"t{i}", *(f"{v:.17g}" for v in row)])
