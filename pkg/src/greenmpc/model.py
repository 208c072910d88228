"""Lettuce greenhouse dynamics: continuous-time ODEs, output map, RK4 step.

State x = (dry weight kg/m^2, indoor CO2 kg/m^3, indoor temperature degC,
indoor humidity kg/m^3), input u = (CO2 injection mg/m^2/s, ventilation mm/s,
heating W/m^2), disturbance d = (radiation W/m^2, outdoor CO2 kg/m^3, outdoor
temperature degC, outdoor humidity kg/m^3), output y = (dry weight g/m^2,
indoor CO2 permille, indoor temperature degC, indoor relative humidity %).

All functions are pure and accept either plain floats/arrays or
:class:`~greenmpc.autodiff.Dual` components, so the same formulas serve the
simulator and the NLP derivative evaluators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import exp, value

# Physical model parameters p1..p28 (canonical values).
P_DEFAULT = np.array([
    0.544,        # p1  yield factor
    2.65e-7,      # p2  shoot/root maintenance respiration rate
    53.0,         # p3  effective canopy surface m^2/kg
    3.55e-9,      # p4  radiation-to-photosynthesis conversion kg/J
    5.11e-6,      # p5  temperature effect on CO2 diffusion, 2nd order
    2.3e-4,       # p6  temperature effect on CO2 diffusion, 1st order
    6.29e-4,      # p7  temperature effect on CO2 diffusion, 0th order
    5.2e-5,       # p8  CO2 compensation point kg/m^3
    4.1,          # p9  CO2 volumetric capacity m
    4.87e-7,      # p10 respiration CO2 release rate
    7.5e-6,       # p11 cover leakage air exchange m/s
    8.314,        # p12 gas constant J/K/mol
    273.15,       # p13 absolute temperature offset K
    101325.0,     # p14 atmospheric pressure Pa
    0.044,        # p15 CO2 molar mass kg/mol
    3.0e4,        # p16 heat capacity of greenhouse air J/m^2/degC
    1290.0,       # p17 heat capacity per volume J/m^3/degC
    6.1,          # p18 cover heat transfer coefficient W/m^2/degC
    0.2,          # p19 sun heat load coefficient
    4.1,          # p20 humidity volumetric capacity m
    0.0036,       # p21 canopy transpiration mass transfer coefficient m/s
    9348.0,       # p22 transpiration vapor parameter
    8314.0,       # p23 gas constant J/K/kmol
    273.15,       # p24 absolute temperature offset K
    17.4,         # p25 saturation vapor pressure parameter
    239.0,        # p26 saturation vapor pressure parameter degC
    17.269,       # p27 saturation vapor pressure parameter
    238.3,        # p28 saturation vapor pressure parameter degC
])

DT_DEFAULT = 900.0  # control/integration interval, seconds

DENOM_TOL = 1e-12


class ModelError(Exception):
    """Base class for model evaluation failures."""


class DegenerateDenominator(ModelError):
    """A formula denominator is (numerically) zero; state is implausible."""


class NonFiniteState(ModelError):
    """An integration stage produced non-finite values."""


@dataclass(frozen=True)
class ModelParams:
    """The 28 physical parameters plus the discretization step."""

    p: np.ndarray = field(default_factory=lambda: P_DEFAULT.copy())
    dt: float = DT_DEFAULT

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        object.__setattr__(self, "p", p)
        if p.shape != (28,):
            raise ValueError(f"expected 28 parameters, got shape {p.shape}")
        if not np.all(p > 0.0):
            raise ValueError("all model parameters must be strictly positive")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class FluxSet:
    """Auxiliary fluxes: photosynthesis, CO2/heat vent exchange, transpiration."""

    phot_c: float
    vent_c: float
    transp_h: float
    vent_h: float
    denom: float


def _fluxes(x1, x2, x3, x4, u2, d1, d2, d4, p):
    """Closed-form auxiliary fluxes; components may be Dual or plain."""
    leaf = -p[4] * x3 ** 2 + p[5] * x3 - p[6]
    denom = p[3] * d1 + leaf * (x2 - p[7])
    canopy = 1.0 - exp(-p[2] * x1)
    phot_c = canopy * (p[3] * d1 * leaf * (x2 - p[7])) / denom
    airflow = u2 * 1e-3 + p[10]
    vent_c = airflow * (x2 - d2)
    sat_vap = (p[21] / (p[22] * (x3 + p[23]))) * exp(p[24] * x3 / (x3 + p[25]))
    transp_h = p[20] * canopy * (sat_vap - x4)
    vent_h = airflow * (x4 - d4)
    return phot_c, vent_c, transp_h, vent_h, denom


def phot_denominator(x, d, p) -> float:
    """Denominator of the photosynthesis flux; zero means implausible state."""
    leaf = -p[4] * value(x[2]) ** 2 + p[5] * value(x[2]) - p[6]
    return p[3] * value(d[0]) + leaf * (value(x[1]) - p[7])


def aux_fluxes(x, u, d, params: ModelParams) -> FluxSet:
    """Evaluate the five auxiliary fluxes at a single (x, u, d) point."""
    p = params.p
    if np.any(np.abs(phot_denominator(x, d, p)) < DENOM_TOL):
        raise DegenerateDenominator("photosynthesis denominator below tolerance")
    phot, ventc, transp, venth, denom = _fluxes(
        x[0], x[1], x[2], x[3], u[1], d[0], d[1], d[3], p
    )
    return FluxSet(phot, ventc, transp, venth, denom)


def _dynamics(x1, x2, x3, x4, u1, u2, u3, d1, d2, d3, d4, p):
    """Right-hand side of the four ODEs; generic over Dual/plain components."""
    phot_c, vent_c, transp_h, vent_h, _ = _fluxes(x1, x2, x3, x4, u2, d1, d2, d4, p)
    resp = x1 * 2.0 ** (x3 / 10.0 - 5.0 / 2.0)
    dx1 = p[0] * phot_c - p[1] * resp
    dx2 = (-phot_c + p[9] * resp + 1e-6 * u1 - vent_c) / p[8]
    dx3 = (u3 - (1e-3 * p[16] * u2 + p[17]) * (x3 - d3) + p[18] * d1) / p[15]
    dx4 = (transp_h - vent_h) / p[19]
    return dx1, dx2, dx3, dx4


def continuous_dynamics(x, u, d, params: ModelParams) -> np.ndarray:
    """Rate of change of the state, with the denominator guard of aux_fluxes."""
    aux_fluxes(x, u, d, params)
    parts = _dynamics(x[0], x[1], x[2], x[3], u[0], u[1], u[2],
                      d[0], d[1], d[2], d[3], params.p)
    return np.array([float(v) for v in parts])


def _output_parts(x1, x2, x3, x4, p):
    gas = p[11] * (x3 + p[12])
    y1 = 1e3 * x1
    y2 = 1e3 * x2 * gas / (p[13] * p[14])
    y3 = x3
    y4 = (1e2 / 11.0) * x4 * gas / exp(p[26] * x3 / (x3 + p[27]))
    return y1, y2, y3, y4


def output(x, params: ModelParams) -> np.ndarray:
    """Measured outputs y(x); raises on the x3 = -p28 singularity."""
    p = params.p
    if np.any(np.abs(value(x[2]) + p[27]) < DENOM_TOL):
        raise DegenerateDenominator("x3 + p28 is zero in the humidity output")
    return np.array([float(v) for v in _output_parts(x[0], x[1], x[2], x[3], p)])


def rk4_step(x, u, d, params: ModelParams, deriv_fn=None) -> np.ndarray:
    """One classical RK4 step of length params.dt with u, d held constant.

    `deriv_fn(x, u, d, params) -> xdot` is a test seam; when omitted the
    greenhouse dynamics are used.
    """
    if deriv_fn is None:
        deriv_fn = continuous_dynamics
    x = np.asarray(x, dtype=float)
    h = params.dt
    if h == 0.0:
        return x.copy()
    k1 = np.asarray(deriv_fn(x, u, d, params))
    k2 = np.asarray(deriv_fn(x + 0.5 * h * k1, u, d, params))
    k3 = np.asarray(deriv_fn(x + 0.5 * h * k2, u, d, params))
    k4 = np.asarray(deriv_fn(x + h * k3, u, d, params))
    x_next = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState(f"RK4 produced non-finite state {x_next}")
    return x_next


def rk4_step_generic(x_parts, u_parts, d_parts, p, dt):
    """RK4 over component tuples; supports Dual components and batching.

    Returns a 4-tuple of next-state components. No finiteness check: the
    caller (the NLP evaluators) inspects values itself.
    """
    def f(xp):
        return _dynamics(xp[0], xp[1], xp[2], xp[3],
                         u_parts[0], u_parts[1], u_parts[2],
                         d_parts[0], d_parts[1], d_parts[2], d_parts[3], p)

    k1 = f(x_parts)
    k2 = f(tuple(x_parts[i] + (0.5 * dt) * k1[i] for i in range(4)))
    k3 = f(tuple(x_parts[i] + (0.5 * dt) * k2[i] for i in range(4)))
    k4 = f(tuple(x_parts[i] + dt * k3[i] for i in range(4)))
    return tuple(
        x_parts[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(4)
    )


def output_generic(x_parts, p):
    """Output map over component tuples; supports Dual components."""
    return _output_parts(x_parts[0], x_parts[1], x_parts[2], x_parts[3], p)
