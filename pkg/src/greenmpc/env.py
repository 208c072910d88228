"""The greenhouse MDP: true-dynamics episodes, stage cost, and indicators.

The environment owns the true model parameters; controllers never see them.
Actions are clipped to the input box and rate bound before being applied.
The stage cost at step k combines the negated dry-weight increase, the input
penalty, and the normalized constraint-violation penalty, all evaluated on
the pre-transition outputs with bounds from the current radiation level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, output, rk4_step
from .weather import WeatherProfile

U_MIN = np.zeros(3)
U_MAX = np.array([1.2, 7.5, 150.0])
DU_MAX = U_MAX / 10.0

Y_RANGE = np.array([np.inf, 1.6, 5.0, 70.0])


def output_bounds(d1: float) -> tuple[np.ndarray, np.ndarray]:
    """Time-varying output box; the temperature band follows the radiation."""
    if d1 >= 10.0:
        y3_lo, y3_hi = 15.0, 20.0
    else:
        y3_lo, y3_hi = 10.0, 15.0
    y_min = np.array([0.0, 0.0, y3_lo, 0.0])
    y_max = np.array([np.inf, 1.6, y3_hi, 70.0])
    return y_min, y_max


def clip_action(u_prev: np.ndarray, u_raw: np.ndarray) -> np.ndarray:
    """Clamp to the input box, then to the rate band around u_prev."""
    u = np.clip(np.asarray(u_raw, dtype=float), U_MIN, U_MAX)
    return np.clip(u, u_prev - DU_MAX, u_prev + DU_MAX)


def violation_terms(y: np.ndarray, y_min: np.ndarray, y_max: np.ndarray) -> np.ndarray:
    """Normalized bound excesses per output; the unbounded y1 contributes 0."""
    rng = y_max - y_min
    over = np.zeros(4)
    under = np.zeros(4)
    finite = np.isfinite(rng)
    over[finite] = np.maximum(0.0, (y - y_max)[finite] / rng[finite])
    under[finite] = np.maximum(0.0, (y_min - y)[finite] / rng[finite])
    return over + under


@dataclass(frozen=True)
class StageCostCoeffs:
    """Weights of the three stage-cost terms (canonical defaults)."""

    c_dy1: float = 100.0
    c_u: np.ndarray = field(default_factory=lambda: np.array([10.0, 1.0, 1.0]))
    omega: np.ndarray = field(default_factory=lambda: np.full(4, 1e5))

    def __post_init__(self):
        object.__setattr__(self, "c_u", np.asarray(self.c_u, dtype=float))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        if self.c_dy1 <= 0 or np.any(self.c_u <= 0) or np.any(self.omega <= 0):
            raise ValueError("stage-cost coefficients must be strictly positive")


@dataclass(frozen=True)
class EconCoeffs:
    """Economic profit coefficients; prices in Hfl, dt in seconds.

    With raw_units=False (default) the harvest weight is converted g -> kg and
    the CO2 injection mg -> kg before applying the per-kg prices; raw_units
    reproduces the indicator formula exactly as printed, without conversions.
    """

    c_price1: float = 1.8
    c_price2: float = 1.6
    c_q: float = 6.35e-9
    c_co2: float = 42e-2
    dt: float = 900.0
    raw_units: bool = False


@dataclass
class RlState:
    """Controller-visible state: plant state plus current and previous outputs."""

    x: np.ndarray
    y: np.ndarray
    y_prev: np.ndarray


def stage_cost(s: RlState, u: np.ndarray, bounds, c: StageCostCoeffs):
    """Return (L, L_y1, L_u, L_psi) for the current state and applied input."""
    y_min, y_max = bounds
    l_y1 = -c.c_dy1 * (s.y[0] - s.y_prev[0])
    l_u = float(c.c_u @ u)
    l_psi = float(c.omega @ violation_terms(s.y, y_min, y_max))
    return l_y1 + l_u + l_psi, l_y1, l_u, l_psi


@dataclass
class EpisodeLog:
    """Per-step trajectories of one completed episode.

    States/outputs have n_steps+1 entries (k = 0..N_s); inputs, disturbances
    and stage costs have n_steps entries (k = 0..N_s-1). The violation array
    covers all n_steps+1 output samples with bounds from the matching d1.
    """

    x: np.ndarray
    y: np.ndarray
    u_raw: np.ndarray
    u: np.ndarray
    d: np.ndarray
    cost: np.ndarray        # columns: L, L_y1, L_u, L_psi
    violations: np.ndarray  # (n_steps+1,) summed normalized excess

    STEP_COLUMNS = (
        ["k"]
        + [f"x{i}" for i in range(1, 5)]
        + [f"y{i}" for i in range(1, 5)]
        + [f"u{i}_raw" for i in range(1, 4)]
        + [f"u{i}" for i in range(1, 4)]
        + [f"d{i}" for i in range(1, 5)]
        + ["L", "L_y1", "L_u", "L_psi", "violation"]
    )

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]

    @property
    def y1_final(self) -> float:
        return float(self.y[-1, 0])

    @property
    def total_cost(self) -> float:
        return float(self.cost[:, 0].sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.STEP_COLUMNS)
            for k in range(self.n_steps):
                row = ([k] + list(self.x[k]) + list(self.y[k])
                       + list(self.u_raw[k]) + list(self.u[k]) + list(self.d[k])
                       + list(self.cost[k]) + [self.violations[k]])
                writer.writerow([repr(float(v)) if isinstance(v, float) or
                                 isinstance(v, np.floating) else v for v in row])
            # final state row: no input/cost entries
            k = self.n_steps
            row = ([k] + list(self.x[k]) + list(self.y[k])
                   + [""] * 10 + ["", "", "", "", repr(float(self.violations[k]))])
            writer.writerow(row)

    def summary(self, econ: EconCoeffs | None = None) -> dict:
        econ = econ or EconCoeffs()
        return {
            "n_steps": self.n_steps,
            "psi": violation_metric(self),
            "profit": profit(self, econ),
            "y1_final": self.y1_final,
            "episode_cost": self.total_cost,
        }


def violation_metric(log: EpisodeLog) -> float:
    """Episode constraint-violation indicator: sum of normalized excesses."""
    return float(log.violations.sum())


def profit(log: EpisodeLog, e: EconCoeffs) -> float:
    """Economic profit: harvest revenue minus CO2 and heating costs."""
    y1 = log.y1_final
    u1 = log.u[:, 0]
    u3 = log.u[:, 2]
    if e.raw_units:
        harvest = e.c_price2 * y1
        inputs = np.sum(e.c_co2 * u1 + e.c_q * u3) * e.dt
    else:
        harvest = e.c_price2 * (y1 * 1e-3)
        inputs = np.sum(e.c_co2 * (u1 * 1e-6) + e.c_q * u3) * e.dt
    return float(e.c_price1 + harvest - inputs)


class GreenhouseEnv:
    """One growth-cycle episode under the true dynamics.

    Instances are single-episode and independent; run any number in parallel
    workers. The weather profile must cover the episode length.
    """

    def __init__(self, params: ModelParams, weather: WeatherProfile,
                 x0: np.ndarray, n_steps: int,
                 coeffs: StageCostCoeffs | None = None):
        weather.require_length(n_steps + 1)
        self.params = params
        self.weather = weather
        self.n_steps = int(n_steps)
        self.coeffs = coeffs or StageCostCoeffs()
        self.x0 = np.asarray(x0, dtype=float)
        self.reset()

    def reset(self) -> RlState:
        y0 = output(self.x0, self.params)
        self.k = 0
        self.u_prev = np.zeros(3)
        self.state = RlState(self.x0.copy(), y0, y0.copy())
        self._x = [self.x0.copy()]
        self._y = [y0]
        self._u_raw = []
        self._u = []
        self._d = []
        self._cost = []
        self._viol = []
        return self.state

    @property
    def done(self) -> bool:
        return self.k >= self.n_steps

    def current_disturbance(self) -> np.ndarray:
        return self.weather.sample(self.k)

    def step(self, u_raw: np.ndarray):
        """Apply one action; returns (next_state, L, info dict)."""
        if self.done:
            raise RuntimeError("episode already finished")
        d = self.weather.sample(self.k)
        u = clip_action(self.u_prev, u_raw)
        bounds = output_bounds(d[0])
        L, l_y1, l_u, l_psi = stage_cost(self.state, u, bounds, self.coeffs)
        viol = float(violation_terms(self.state.y, *bounds).sum())

        x_next = rk4_step(self.state.x, u, d, self.params)
        y_next = output(x_next, self.params)
        next_state = RlState(x_next, y_next, self.state.y)

        self._x.append(x_next)
        self._y.append(y_next)
        self._u_raw.append(np.asarray(u_raw, dtype=float).copy())
        self._u.append(u)
        self._d.append(d.copy())
        self._cost.append([L, l_y1, l_u, l_psi])
        self._viol.append(viol)

        self.u_prev = u
        self.state = next_state
        self.k += 1
        info = {"u": u, "d": d, "violation": viol}
        return next_state, L, info

    def finalize(self) -> EpisodeLog:
        """Close the episode: add the final state's violation increment."""
        if not self.done:
            raise RuntimeError("episode still running")
        d_final = self.weather.sample(self.n_steps)
        bounds = output_bounds(d_final[0])
        viol_final = float(violation_terms(self.state.y, *bounds).sum())
        return EpisodeLog(
            x=np.array(self._x),
            y=np.array(self._y),
            u_raw=np.array(self._u_raw),
            u=np.array(self._u),
            d=np.array(self._d),
            cost=np.array(self._cost),
            violations=np.array(self._viol + [viol_final]),
        )
