import numpy as np
import pytest

from greenmpc.env import (
    EconCoeffs,
    EpisodeLog,
    GreenhouseEnv,
    RlState,
    StageCostCoeffs,
    clip_action,
    output_bounds,
    profit,
    stage_cost,
    violation_metric,
    violation_terms,
)
from greenmpc.model import ModelParams, output, rk4_step
from greenmpc.weather import synth_profile

X0 = np.array([0.0035, 0.001, 15.0, 0.008])


class TestBounds:
    def test_night_band(self):
        y_min, y_max = output_bounds(5.0)
        assert y_min[2] == 10.0 and y_max[2] == 15.0

    def test_day_band(self):
        y_min, y_max = output_bounds(50.0)
        assert y_min[2] == 15.0 and y_max[2] == 20.0

    def test_threshold_uses_geq_branch(self):
        y_min, y_max = output_bounds(10.0)
        assert y_min[2] == 15.0 and y_max[2] == 20.0

    def test_fixed_components(self):
        y_min, y_max = output_bounds(0.0)
        assert np.array_equal(y_min, [0.0, 0.0, 10.0, 0.0])
        assert y_max[0] == np.inf
        assert y_max[1] == 1.6 and y_max[3] == 70.0


class TestClip:
    def test_rate_bound_from_rest(self):
        u = clip_action(np.zeros(3), np.array([1.2, 7.5, 150.0]))
        assert np.allclose(u, [0.12, 0.75, 15.0])

    def test_fixed_point(self):
        u_prev = np.array([0.5, 3.0, 40.0])
        assert np.array_equal(clip_action(u_prev, u_prev), u_prev)

    def test_box_lower(self):
        u = clip_action(np.zeros(3), np.array([-1.0, -1.0, -1.0]))
        assert np.array_equal(u, np.zeros(3))

    def test_always_feasible(self):
        rng = np.random.default_rng(0)
        u_max = np.array([1.2, 7.5, 150.0])
        u_prev = np.zeros(3)
        for _ in range(200):
            u = clip_action(u_prev, rng.uniform(-2, 2, 3) * u_max)
            assert np.all(u >= -1e-15) and np.all(u <= u_max + 1e-12)
            assert np.all(np.abs(u - u_prev) <= u_max / 10 + 1e-12)
            u_prev = u


class TestStageCost:
    def setup_method(self):
        self.c = StageCostCoeffs()
        self.bounds = output_bounds(50.0)

    def test_zero_inside_bounds(self):
        y = np.array([3.5, 0.5, 17.0, 50.0])
        s = RlState(X0, y, y.copy())
        L, *_ = stage_cost(s, np.zeros(3), self.bounds, self.c)
        assert L == 0.0

    def test_humidity_violation_term(self):
        y = np.array([3.5, 0.5, 17.0, 80.0])
        s = RlState(X0, y, y.copy())
        L, l_y1, l_u, l_psi = stage_cost(s, np.zeros(3), self.bounds, self.c)
        assert l_psi == pytest.approx(1e5 * 10.0 / 70.0)
        assert L == pytest.approx(l_psi)

    def test_growth_reward(self):
        y = np.array([3.51, 0.5, 17.0, 50.0])
        y_prev = np.array([3.50, 0.5, 17.0, 50.0])
        s = RlState(X0, y, y_prev)
        _, l_y1, _, _ = stage_cost(s, np.zeros(3), self.bounds, self.c)
        assert l_y1 == pytest.approx(-1.0)

    def test_input_penalty(self):
        y = np.array([3.5, 0.5, 17.0, 50.0])
        s = RlState(X0, y, y.copy())
        u = np.array([1.0, 2.0, 30.0])
        _, _, l_u, _ = stage_cost(s, u, self.bounds, self.c)
        assert l_u == pytest.approx(10.0 * 1.0 + 2.0 + 30.0)

    def test_unbounded_y1_never_contributes(self):
        y = np.array([1e9, 0.5, 17.0, 50.0])
        s = RlState(X0, y, y.copy())
        _, _, _, l_psi = stage_cost(s, np.zeros(3), self.bounds, self.c)
        assert l_psi == 0.0

    def test_psi_zero_iff_stage_violation_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            y = np.array([rng.uniform(0, 300), rng.uniform(0, 2.5),
                          rng.uniform(5, 25), rng.uniform(20, 90)])
            s = RlState(X0, y, y.copy())
            _, _, _, l_psi = stage_cost(s, np.zeros(3), self.bounds, self.c)
            viol = violation_terms(y, *self.bounds).sum()
            assert (l_psi == 0.0) == (viol <= 1e-12)


def make_log(n_steps=3, y1_final=0.0, u=None, y4=50.0):
    """Minimal hand-built feasible log for metric tests."""
    u = np.zeros((n_steps, 3)) if u is None else u
    y = np.tile([3.5, 0.5, 12.0, y4], (n_steps + 1, 1))
    y[-1, 0] = y1_final
    x = np.tile(X0, (n_steps + 1, 1))
    d = np.tile([0.0, 8e-4, 10.0, 5e-3], (n_steps, 1))
    viol = np.zeros(n_steps + 1)
    bounds = output_bounds(0.0)
    for k in range(n_steps + 1):
        viol[k] = violation_terms(y[k], *bounds).sum()
    return EpisodeLog(x=x, y=y, u_raw=u.copy(), u=u, d=d,
                      cost=np.zeros((n_steps, 4)), violations=viol)


class TestMetrics:
    def test_psi_zero_when_feasible(self):
        assert violation_metric(make_log()) == 0.0

    def test_psi_single_humidity_violation(self):
        log = make_log(n_steps=1)
        log.violations[0] = violation_terms(
            np.array([3.5, 0.5, 12.0, 80.0]), *output_bounds(0.0)).sum()
        assert violation_metric(log) == pytest.approx(10.0 / 70.0, abs=1e-9)

    def test_psi_additivity(self):
        log1 = make_log(n_steps=4, y4=80.0)
        log2 = make_log(n_steps=9, y4=80.0)
        per_step = violation_metric(log1) / 5
        assert violation_metric(log2) == pytest.approx(10 * per_step)

    def test_profit_zero_inputs_zero_yield(self):
        assert profit(make_log(), EconCoeffs()) == pytest.approx(1.8)

    def test_profit_single_heating_step(self):
        u = np.zeros((1, 3))
        u[0, 2] = 150.0
        p = profit(make_log(n_steps=1, u=u), EconCoeffs())
        assert p == pytest.approx(1.8 - 6.35e-9 * 150.0 * 900.0, abs=1e-12)

    def test_profit_single_co2_step(self):
        u = np.zeros((1, 3))
        u[0, 0] = 1.2
        p = profit(make_log(n_steps=1, u=u), EconCoeffs())
        assert p == pytest.approx(1.8 - 0.42 * 1.2e-6 * 900.0, abs=1e-12)

    def test_profit_raw_units_mode(self):
        u = np.zeros((1, 3))
        u[0, 0] = 1.2
        log = make_log(n_steps=1, u=u, y1_final=100.0)
        p = profit(log, EconCoeffs(raw_units=True))
        assert p == pytest.approx(1.8 + 1.6 * 100.0 - 0.42 * 1.2 * 900.0)

    def test_profit_yield_conversion(self):
        log = make_log(y1_final=135.0)
        p = profit(log, EconCoeffs())
        assert p == pytest.approx(1.8 + 1.6 * 0.135)


class TestEnv:
    def make_env(self, n_steps=10):
        weather = synth_profile(1)
        return GreenhouseEnv(ModelParams(), weather, X0, n_steps)

    def test_initial_state(self):
        env = self.make_env()
        s = env.state
        assert np.array_equal(s.y, s.y_prev)
        assert np.array_equal(s.y, output(X0, ModelParams()))

    def test_step_matches_rk4_oracle(self):
        env = self.make_env()
        d = env.weather.sample(0)
        s, L, info = env.step(np.zeros(3))
        expected = rk4_step(X0, np.zeros(3), d, ModelParams())
        assert np.array_equal(s.x, expected)
        assert np.array_equal(s.y, output(expected, ModelParams()))

    def test_y_prev_propagation(self):
        env = self.make_env()
        y0 = env.state.y.copy()
        s, _, _ = env.step(np.array([0.1, 0.1, 5.0]))
        assert np.array_equal(s.y_prev, y0)

    def test_determinism(self):
        actions = [np.array([0.1, 0.2, 5.0]), np.array([0.2, 0.4, 10.0])]
        logs = []
        for _ in range(2):
            env = self.make_env(n_steps=2)
            for a in actions:
                env.step(a)
            logs.append(env.finalize())
        assert np.array_equal(logs[0].x, logs[1].x)
        assert np.array_equal(logs[0].cost, logs[1].cost)

    def test_full_episode_log_shapes(self):
        env = self.make_env(n_steps=5)
        while not env.done:
            env.step(np.zeros(3))
        log = env.finalize()
        assert log.x.shape == (6, 4)
        assert log.y.shape == (6, 4)
        assert log.u.shape == (5, 3)
        assert log.violations.shape == (6,)
        assert log.n_steps == 5

    def test_clipping_applied_inside_step(self):
        env = self.make_env()
        _, _, info = env.step(np.array([99.0, 99.0, 99.0]))
        assert np.allclose(info["u"], [0.12, 0.75, 15.0])

    def test_csv_round_trip(self, tmp_path):
        env = self.make_env(n_steps=3)
        while not env.done:
            env.step(np.array([0.05, 0.5, 2.0]))
        log = env.finalize()
        path = tmp_path / "ep.csv"
        log.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].split(",") == EpisodeLog.STEP_COLUMNS
        assert len(lines) == 1 + 3 + 1  # header + steps + final state row

    def test_summary_keys(self):
        env = self.make_env(n_steps=2)
        while not env.done:
            env.step(np.zeros(3))
        summary = env.finalize().summary()
        assert set(summary) == {"n_steps", "psi", "profit", "y1_final",
                                "episode_cost"}
        assert summary["psi"] >= 0.0
