"""Point-mass tasks: reward/cost formulas, dynamics order, discretization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpo import CircleParams, PointMassEnv, RunParams
from ccpo.pointmass import (
    ACCEL_GRID,
    N_ACTIONS,
    circle_cost,
    circle_reward,
    run_reward_cost,
)

UNIFORM = np.full(N_ACTIONS, 1.0 / N_ACTIONS)
COAST = ACCEL_GRID.tolist().index([0.0, 0.0])
THRUST_X = ACCEL_GRID.tolist().index([1.0, 0.0])


def _state(x, y, vx, vy):
    return np.array([x, y, vx, vy], dtype=float)


def _one_hot(action):
    probs = np.zeros(N_ACTIONS)
    probs[action] = 1.0
    return probs


class TestCircleFormulas:
    def test_reward_on_circle_tangential(self):
        assert circle_reward(_state(1, 0, 0, 1), radius=1.0) == 1.0

    def test_reward_zero_at_origin_numerator(self):
        assert circle_reward(_state(0, 0, 1, 1), radius=1.0) == 0.0

    def test_reward_off_circle_denominator(self):
        # numerator 2, denominator 1 + |2 - 1|
        assert circle_reward(_state(2, 0, 0, 1), radius=1.0) == 1.0

    def test_cost_inside_region(self):
        assert circle_cost(_state(0.5, 0, 0, 0), x_limit=1.0) == 0

    def test_cost_outside_region(self):
        assert circle_cost(_state(1.5, 0, 0, 0), x_limit=1.0) == 1
        assert circle_cost(_state(-2.0, 0, 0, 0), x_limit=1.0) == 1

    @settings(max_examples=50, deadline=None)
    @given(x=st.floats(-2, 2), y=st.floats(-2, 2),
           vx=st.floats(-2, 2), vy=st.floats(-2, 2))
    def test_cost_invariant_under_y_reflection(self, x, y, vx, vy):
        a = circle_cost(_state(x, y, vx, vy), x_limit=0.6)
        b = circle_cost(_state(x, -y, vx, -vy), x_limit=0.6)
        assert a == b


class TestRunFormulas:
    def test_reward_is_distance_decrease(self):
        params = RunParams(goal_x=10.0, goal_y=0.0)
        r, _ = run_reward_cost(_state(0, 0, 0, 0), _state(1, 0, 0, 0), params)
        assert r == pytest.approx(1.0)

    def test_cost_zero_when_inside_both_limits(self):
        params = RunParams(y_limit=0.5, v_limit=1.0)
        _, c = run_reward_cost(_state(0, 0, 0, 0),
                               _state(0, 0.2, 0.4, 0.0), params)
        assert c == 0

    def test_cost_two_when_both_limits_broken(self):
        params = RunParams(y_limit=0.5, v_limit=1.0)
        _, c = run_reward_cost(_state(0, 0, 0, 0),
                               _state(0, 1.0, 2.0, 0.0), params)
        assert c == 2

    @settings(max_examples=50, deadline=None)
    @given(shift=st.floats(-50, 50), y=st.floats(-2, 2),
           vx=st.floats(-3, 3), vy=st.floats(-3, 3))
    def test_cost_invariant_under_x_translation(self, shift, y, vx, vy):
        params = RunParams()
        prev = _state(0, 0, 0, 0)
        _, c0 = run_reward_cost(prev, _state(1.0, y, vx, vy), params)
        _, c1 = run_reward_cost(prev, _state(1.0 + shift, y, vx, vy), params)
        assert c0 == c1


class TestDynamics:
    def test_position_updates_before_velocity(self):
        env = PointMassEnv("circle", CircleParams(dt=0.1, accel=1.0))
        nxt, _, _ = env.step(_state(0, 0, 1, 0), THRUST_X)
        # x + vx*dt with the old velocity, not the accelerated one
        assert nxt[0] == pytest.approx(0.1)
        assert nxt[2] == pytest.approx(1.1)

    def test_speed_capped(self):
        env = PointMassEnv("circle", CircleParams(v_max=1.5, accel=5.0))
        nxt, _, _ = env.step(_state(0, 0, 1.5, 0), THRUST_X)
        assert np.hypot(nxt[2], nxt[3]) <= 1.5 + 1e-12

    def test_position_clipped_to_bounds(self):
        env = PointMassEnv("circle", CircleParams(pos_bound=1.8))
        nxt, _, _ = env.step(_state(1.79, 0, 1.5, 0), COAST)
        assert abs(nxt[0]) <= 1.8

    def test_step_reports_post_step_signals(self):
        env = PointMassEnv("circle", CircleParams(x_limit=0.6))
        nxt, reward, cost = env.step(_state(0.65, 0, 0, 0.5), COAST)
        assert reward == pytest.approx(circle_reward(nxt, 1.0))
        assert cost == circle_cost(nxt, 0.6)

    def test_action_grid_is_nine_point(self):
        assert N_ACTIONS == 9
        assert ACCEL_GRID.shape == (9, 2)
        assert sorted(set(map(tuple, ACCEL_GRID.tolist()))) == [
            (ax, ay) for ax in (-1.0, 0.0, 1.0) for ay in (-1.0, 0.0, 1.0)]

    def test_invalid_action_raises(self):
        env = PointMassEnv("circle")
        with pytest.raises(ValueError):
            env.step(_state(0, 0, 0, 0), 9)

    def test_unknown_task_raises(self):
        with pytest.raises(ValueError):
            PointMassEnv("swim")


class TestRollout:
    def test_horizon_zero_is_empty(self):
        env = PointMassEnv("circle")
        steps = env.rollout(lambda s: UNIFORM, horizon=0,
                            rng=np.random.default_rng(0))
        assert steps == []

    def test_default_horizon_from_params(self):
        env = PointMassEnv("circle", CircleParams(horizon=7))
        steps = env.rollout(lambda s: _one_hot(COAST), horizon=None,
                            rng=np.random.default_rng(0))
        assert len(steps) == 7

    def test_fixed_seed_reproducible(self):
        env = PointMassEnv("run")
        a = env.rollout(lambda s: UNIFORM, 30, np.random.default_rng(9))
        b = env.rollout(lambda s: UNIFORM, 30, np.random.default_rng(9))
        assert len(a) == 30
        assert all(np.array_equal(x.state, y.state) and x.action == y.action
                   for x, y in zip(a, b))

    def test_threshold_tag_propagates(self):
        env = PointMassEnv("circle")
        steps = env.rollout(lambda s: UNIFORM, 3, np.random.default_rng(0),
                            behavior_threshold=25.0)
        assert all(s.behavior_threshold == 25.0 for s in steps)

    def test_distribution_policy_must_normalize(self):
        env = PointMassEnv("circle")
        with pytest.raises(ValueError):
            env.rollout(lambda s: np.full(N_ACTIONS, 0.2), 3,
                        np.random.default_rng(0))

    def test_circle_step_costs_are_binary(self):
        env = PointMassEnv("circle")
        steps = env.rollout(lambda s: UNIFORM, 100, np.random.default_rng(4))
        assert set(s.cost for s in steps) <= {0.0, 1.0}

    def test_run_step_costs_in_zero_one_two(self):
        env = PointMassEnv("run")
        steps = env.rollout(lambda s: UNIFORM, 100, np.random.default_rng(4))
        assert set(s.cost for s in steps) <= {0.0, 1.0, 2.0}


class TestDiscretization:
    def test_cell_indexer_covers_range(self):
        for task in ("circle", "run"):
            env = PointMassEnv(task)
            n_cells, indexer = env.cell_indexer()
            rng = np.random.default_rng(0)
            for _ in range(100):
                s = env.reset(rng)
                for _ in range(5):
                    idx = int(indexer(s)[0])
                    assert 0 <= idx < n_cells
                    s, _, _ = env.step(s, int(rng.integers(N_ACTIONS)))

    def test_cell_indexer_accepts_batches(self):
        env = PointMassEnv("circle")
        n_cells, indexer = env.cell_indexer()
        rng = np.random.default_rng(1)
        batch = np.stack([env.reset(rng) for _ in range(16)])
        idx = indexer(batch)
        assert idx.shape == (16,)
        assert np.all((0 <= idx) & (idx < n_cells))

    def test_reset_starts_on_circle(self):
        params = CircleParams(start_radius=0.8, start_speed=0.6)
        env = PointMassEnv("circle", params)
        rng = np.random.default_rng(2)
        for _ in range(20):
            s = env.reset(rng)
            assert np.hypot(s[0], s[1]) == pytest.approx(0.8)
            assert np.hypot(s[2], s[3]) == pytest.approx(0.6)
