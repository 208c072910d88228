from types import SimpleNamespace

import numpy as np
import pytest

from greenmpc.model import (
    DegenerateDenominator,
    ModelParams,
    NonFiniteState,
    P_DEFAULT,
    aux_fluxes,
    continuous_dynamics,
    output,
    rk4_step,
)

X0 = np.array([0.0035, 0.001, 15.0, 0.008])  # planting state


@pytest.fixture
def params():
    return ModelParams()


def rk4_fine(x, u, d, params, substeps=100):
    """Independent fine-step RK4 oracle over one control interval."""
    sub = ModelParams(params.p, params.dt / substeps)
    for _ in range(substeps):
        x = rk4_step(x, u, d, sub)
    return x


class TestParams:
    def test_defaults_valid(self, params):
        assert params.p.shape == (28,)
        assert params.dt == 900.0

    def test_rejects_nonpositive(self):
        bad = P_DEFAULT.copy()
        bad[3] = 0.0
        with pytest.raises(ValueError):
            ModelParams(bad)
        with pytest.raises(ValueError):
            ModelParams(P_DEFAULT, dt=-1.0)


class TestFluxes:
    def test_zero_canopy_no_photosynthesis(self, params):
        x = np.array([0.0, 0.001, 15.0, 0.008])
        fl = aux_fluxes(x, np.zeros(3), np.array([100.0, 8e-4, 10.0, 5e-3]), params)
        assert fl.phot_c == 0.0

    def test_no_co2_gradient_no_vent_flux(self, params):
        x = np.array([0.01, 8e-4, 15.0, 0.008])
        d = np.array([100.0, 8e-4, 10.0, 5e-3])
        fl = aux_fluxes(x, np.array([0.0, 0.0, 0.0]), d, params)
        assert fl.vent_c == 0.0

    def test_vent_flux_hand_value(self, params):
        # (7.5e-3 + 7.5e-6) * (0.0012 - 0.0008) = 3.003e-6 kg/m^2/s
        x = np.array([0.01, 0.0012, 15.0, 0.008])
        d = np.array([100.0, 0.0008, 10.0, 5e-3])
        fl = aux_fluxes(x, np.array([0.0, 7.5, 0.0]), d, params)
        assert fl.vent_c == pytest.approx(3.003e-6, rel=1e-12)

    def test_degenerate_denominator_raises(self, params):
        # d1 = 0 and x2 at the compensation point p8 makes the denominator 0
        x = np.array([0.01, params.p[7], 15.0, 0.008])
        d = np.array([0.0, 8e-4, 10.0, 5e-3])
        with pytest.raises(DegenerateDenominator):
            aux_fluxes(x, np.zeros(3), d, params)


class TestDynamics:
    def test_equilibrium_at_zero_canopy(self, params):
        # x1 = 0 kills growth/respiration; d3 = x3 and d1 = 0 kill heat flux;
        # x4 chosen so transpiration (zero via canopy) matches vent (x4 = d4).
        x = np.array([0.0, 8e-4, 15.0, 5e-3])
        d = np.array([0.0, 8e-4, 15.0, 5e-3])
        dx = continuous_dynamics(x, np.zeros(3), d, params)
        assert dx[0] == 0.0
        assert dx[2] == 0.0
        assert dx[3] == 0.0

    def test_planting_state_cooling(self, params):
        d = np.array([0.0, 0.001, 10.0, 0.005])
        dx = continuous_dynamics(X0, np.zeros(3), d, params)
        assert np.all(np.isfinite(dx))
        # indoor warmer than outdoor, no heating: temperature falls
        assert dx[2] == pytest.approx(-params.p[17] * 5.0 / params.p[15])
        assert dx[2] < 0.0

    def test_scripted_rhs_cross_check(self, params):
        # independent transliteration of the four ODEs at a generic point
        p = params.p
        x = np.array([0.01, 0.0012, 18.0, 0.009])
        u = np.array([0.6, 3.0, 40.0])
        d = np.array([250.0, 8.3e-4, 12.0, 6e-3])
        leaf = -p[4] * x[2] ** 2 + p[5] * x[2] - p[6]
        phi = p[3] * d[0] + leaf * (x[1] - p[7])
        phot = (1 - np.exp(-p[2] * x[0])) * p[3] * d[0] * leaf * (x[1] - p[7]) / phi
        wexp = x[0] * 2.0 ** (x[2] / 10.0 - 2.5)
        ventc = (u[1] * 1e-3 + p[10]) * (x[1] - d[1])
        transp = p[20] * (1 - np.exp(-p[2] * x[0])) * (
            p[21] / (p[22] * (x[2] + p[23])) * np.exp(p[24] * x[2] / (x[2] + p[25]))
            - x[3]
        )
        venth = (u[1] * 1e-3 + p[10]) * (x[3] - d[3])
        expected = np.array([
            p[0] * phot - p[1] * wexp,
            (-phot + p[9] * wexp + 1e-6 * u[0] - ventc) / p[8],
            (u[2] - (1e-3 * p[16] * u[1] + p[17]) * (x[2] - d[2]) + p[18] * d[0]) / p[15],
            (transp - venth) / p[19],
        ])
        assert np.allclose(continuous_dynamics(x, u, d, params), expected, rtol=1e-14)

    def test_heat_capacity_scaling(self, params):
        # with u3 = 0 and d1 = 0, xdot3 is proportional to 1/p16
        p2 = P_DEFAULT.copy()
        p2[15] *= 2.0
        doubled = ModelParams(p2)
        x = np.array([0.01, 0.001, 15.0, 0.008])
        d = np.array([0.0, 8e-4, 5.0, 5e-3])
        u = np.zeros(3)
        a = continuous_dynamics(x, u, d, params)[2]
        b = continuous_dynamics(x, u, d, doubled)[2]
        assert b == pytest.approx(a / 2.0, rel=1e-12)

    def test_x1_zero_growth_invariant(self, params):
        rng = np.random.default_rng(3)
        for _ in range(25):
            x = np.array([0.0, rng.uniform(5e-4, 3e-3), rng.uniform(5, 25),
                          rng.uniform(3e-3, 2e-2)])
            u = rng.uniform(0, 1, 3) * np.array([1.2, 7.5, 150.0])
            d = np.array([rng.uniform(0, 400), rng.uniform(4e-4, 1e-3),
                          rng.uniform(-5, 25), rng.uniform(3e-3, 1e-2)])
            assert continuous_dynamics(x, u, d, params)[0] == 0.0


class TestOutput:
    def test_dry_weight_scaling_exact(self, params):
        y = output(X0, params)
        assert y[0] == 1000.0 * X0[0]
        assert y[0] == 3.5

    def test_co2_permille_hand_value(self, params):
        y = output(np.array([0.0035, 0.001, 15.0, 0.008]), params)
        expected = 1e3 * 0.001 * (8.314 * 288.15) / (101325.0 * 0.044)
        assert y[1] == pytest.approx(expected, rel=1e-12)
        assert y[1] == pytest.approx(0.5374, rel=1e-3)

    def test_temperature_identity(self, params):
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = np.array([rng.uniform(0, 0.1), rng.uniform(0, 3e-3),
                          rng.uniform(-5, 30), rng.uniform(0, 2e-2)])
            y = output(x, params)
            assert y[2] == x[2]
            assert y[0] == 1000.0 * x[0]

    def test_humidity_singularity(self, params):
        x = np.array([0.01, 0.001, -params.p[27], 0.008])
        with pytest.raises(DegenerateDenominator):
            output(x, params)


class TestRk4:
    def test_zero_step_identity(self):
        fake = SimpleNamespace(p=P_DEFAULT, dt=0.0)
        x = np.array([1.0, 2.0, 3.0, 4.0])
        out = rk4_step(x, None, None, fake, deriv_fn=lambda x, u, d, p: -x)
        assert np.array_equal(out, x)

    def test_linear_system_matches_taylor(self):
        # xdot = -x: RK4 multiplies by the degree-4 Taylor polynomial of e^-h
        fake = SimpleNamespace(p=P_DEFAULT, dt=0.3)
        h = 0.3
        factor = 1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24
        x = np.array([1.0, -2.0, 0.5, 3.0])
        out = rk4_step(x, None, None, fake, deriv_fn=lambda x, u, d, p: -x)
        assert np.allclose(out, factor * x, rtol=1e-15)

    def test_matches_fine_step_oracle(self, params):
        u = np.zeros(3)
        d = np.array([0.0, 0.001, 10.0, 0.005])
        coarse = rk4_step(X0, u, d, params)
        fine = rk4_fine(X0, u, d, params)
        assert np.allclose(coarse, fine, rtol=1e-6)

    def test_oracle_over_low_ventilation_envelope(self, params):
        # At ventilation beyond ~1 mm/s the vent-exchange mode (tau ~ 550 s at
        # u2max) is under-resolved by a single 900 s step; measured worst-case
        # one-step error from arbitrary off-equilibrium states at u2 <= 1 is
        # ~6e-3. Near-quasi-equilibrium trajectories (the simulated regime)
        # track the oracle to 1e-5 and better; see the acceptance suite.
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = np.array([rng.uniform(1e-3, 0.3), rng.uniform(4e-4, 2.5e-3),
                          rng.uniform(8, 22), rng.uniform(4e-3, 1.5e-2)])
            u = rng.uniform(0, 1, 3) * np.array([1.2, 1.0, 150.0])
            d = np.array([rng.uniform(0, 400), rng.uniform(4e-4, 1e-3),
                          rng.uniform(0, 20), rng.uniform(3e-3, 1e-2)])
            coarse = rk4_step(x, u, d, params)
            fine = rk4_fine(x, u, d, params)
            assert np.allclose(coarse, fine, rtol=2e-2)

    def test_fourth_order_convergence(self, params):
        # halving the step should shrink the error against a very fine
        # reference by ~2^4
        x = np.array([0.02, 1.2e-3, 16.0, 9e-3])
        u = np.array([0.5, 3.0, 40.0])
        d = np.array([250.0, 8.3e-4, 12.0, 6e-3])
        ref = rk4_fine(x, u, d, params, substeps=6400)
        err_coarse = np.abs(rk4_step(x, u, d, params) - ref)
        err_half = np.abs(rk4_fine(x, u, d, params, substeps=2) - ref)
        ratios = err_coarse / err_half
        assert np.all(ratios > 8.0)

    def test_deterministic(self, params):
        u = np.array([0.3, 2.0, 30.0])
        d = np.array([150.0, 8e-4, 12.0, 6e-3])
        a = rk4_step(X0, u, d, params)
        b = rk4_step(X0.copy(), u.copy(), d.copy(), params)
        assert np.array_equal(a, b)

    def test_nonfinite_raises(self, params):
        fake = SimpleNamespace(p=P_DEFAULT, dt=1.0)
        with pytest.raises(NonFiniteState):
            rk4_step(np.ones(4), None, None, fake,
                     deriv_fn=lambda x, u, d, p: x * np.inf)
