"""Weather profiles: CSV ingestion, synthetic generation, Brownian perturbation.

A profile is a (M, 4) array of disturbances sampled every 900 s:
d1 radiation W/m^2, d2 outdoor CO2 kg/m^3, d3 outdoor temperature degC,
d4 outdoor humidity kg/m^3.

Per-episode stochastic perturbation adds time-correlated Brownian noise,
applied relative to the local magnitude: d2/d4 get a cumulative-noise series
over the whole horizon, d1/d3 get a pinned excursion per daylight segment so
night-boundary values are preserved exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

SAMPLES_PER_DAY = 96  # 24 h at 900 s
RHO_DEFAULT = np.array([0.01, 0.005, 0.01, 0.005])

CSV_HEADER = ["d1", "d2", "d3", "d4"]


class WeatherError(Exception):
    pass


class ParseError(WeatherError):
    pass


class TooShort(WeatherError):
    """Profile has fewer rows than the requested episode needs."""


@dataclass(frozen=True)
class NoiseSpec:
    """Half-widths of the relative white-noise increments, plus the RNG seed."""

    rho: np.ndarray = field(default_factory=lambda: RHO_DEFAULT.copy())
    seed: int = 0

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        object.__setattr__(self, "rho", rho)
        if rho.shape != (4,) or np.any(rho < 0):
            raise ValueError("rho must be 4 nonnegative half-widths")


@dataclass(frozen=True)
class WeatherProfile:
    """Disturbance samples on the 900 s grid; index defines time."""

    data: np.ndarray
    dt: float = 900.0

    def __post_init__(self):
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[1] != 4:
            raise ValueError("weather data must be (M, 4)")
        if not np.all(np.isfinite(data)):
            raise ParseError("non-finite weather sample")
        if np.any(data[:, 0] < 0):
            raise ParseError("negative radiation sample")

    def __len__(self) -> int:
        return self.data.shape[0]

    def require_length(self, n: int) -> None:
        if len(self) < n:
            raise TooShort(f"profile has {len(self)} samples, episode needs {n}")

    def sample(self, k: int) -> np.ndarray:
        """Disturbance at step k, holding the final sample past the end."""
        return self.data[min(k, len(self) - 1)]

    def preview(self, k: int, n: int) -> np.ndarray:
        """n samples starting at step k, padded by holding the last sample."""
        idx = np.minimum(np.arange(k, k + n), len(self) - 1)
        return self.data[idx]

    def day_segments(self) -> list[tuple[int, int]]:
        """Maximal runs of daylight (d1 > 0) as (start, stop) index pairs."""
        day = self.data[:, 0] > 0.0
        segments = []
        start = None
        for i, is_day in enumerate(day):
            if is_day and start is None:
                start = i
            elif not is_day and start is not None:
                segments.append((start, i))
                start = None
        if start is not None:
            segments.append((start, len(day)))
        return segments


def load_profile(path) -> WeatherProfile:
    """Read a profile from CSV with header d1,d2,d3,d4."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise ParseError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    try:
        return WeatherProfile(np.array(rows))
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


def save_profile(profile: WeatherProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in profile.data:
            writer.writerow([repr(float(v)) for v in row])


def brownian_series(n: int, rho: float, rng) -> np.ndarray:
    """Cumulative sum of white noise W ~ U(-rho, rho); B(0) = W(0)."""
    if n < 1:
        raise ValueError("series length must be >= 1")
    w = rng.uniform(-rho, rho, size=n) if rho > 0 else np.zeros(n)
    return np.cumsum(w)

def brownian_excursion(n: int, rho: float, rng) -> np.ndarray:
    """Pinned cumulative-noise bridge: exactly 0 at indices 0 and n-1."""
    if n < 2:
        raise ValueError("excursion length must be >= 2")
    walk = np.zeros(n)
    if rho > 0:
        walk[1:] = np.cumsum(rng.uniform(-rho, rho, size=n - 1))
    k = np.arange(n, dtype=float)
    return walk - (k / (n - 1)) * walk[-1]


def perturb_profile(base: WeatherProfile, spec: NoiseSpec) -> WeatherProfile:
    """Per-episode stochastic profile: relative Brownian noise on each channel.

    d2 and d4 are multiplied by (1 + B) with B a cumulative-noise series over
    the whole profile; d1 and d3 by (1 + E) with E a pinned excursion per
    daylight segment, so values at every day/night boundary equal the base.
    The result is floored at 0 on the nonnegative channels. Draw order is
    fixed (d2 series, d4 series, then d1 and d3 excursions per segment), so
    the construction is reproducible from the seed alone.
    """
    rng = np.random.default_rng(spec.seed)
    out = base.data.copy()
    m = len(base)

    out[:, 1] *= 1.0 + brownian_series(m, spec.rho[1], rng)
    out[:, 3] *= 1.0 + brownian_series(m, spec.rho[3], rng)

    segments = base.day_segments()
    for channel, rho in ((0, spec.rho[0]), (2, spec.rho[2])):
        for start, stop in segments:
            if stop - start < 2:
                continue
            exc = brownian_excursion(stop - start, rho, rng)
            out[start:stop, channel] *= 1.0 + exc

    out[:, 0] = np.maximum(out[:, 0], 0.0)
    out[:, 1] = np.maximum(out[:, 1], 0.0)
    out[:, 3] = np.maximum(out[:, 3], 0.0)
    return WeatherProfile(out, base.dt)


def synth_profile(days: int, rng=None, *, peak_radiation: float = 400.0,
                  temp_low: float = 8.0, temp_high: float = 18.0,
                  co2_mean: float = 8.3e-4, humidity_mean: float = 6e-3,
                  ripple: float = 0.02) -> WeatherProfile:
    """Smooth diurnal profile: 96 samples/day, daylight 06:00-18:00.

    Deterministic; `rng` is accepted for interface symmetry with the
    perturbation path but unused.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    m = days * SAMPLES_PER_DAY
    frac = (np.arange(m) % SAMPLES_PER_DAY) / SAMPLES_PER_DAY
    sun = np.sin(2.0 * np.pi * (frac - 0.25))
    d1 = peak_radiation * np.maximum(0.0, sun)
    mid = 0.5 * (temp_low + temp_high)
    amp = 0.5 * (temp_high - temp_low)
    d3 = mid + amp * np.sin(2.0 * np.pi * (frac - 0.375))
    d2 = co2_mean * (1.0 - ripple * np.maximum(0.0, sun))
    d4 = humidity_mean * (1.0 + ripple * np.sin(2.0 * np.pi * (frac - 0.5)))
    return WeatherProfile(np.column_stack([d1, d2, d3, d4]))
