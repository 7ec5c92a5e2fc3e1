"""Per-threshold policy mixing and the single-dual conditioned baseline."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccpo import (
    CombinedPolicy,
    LagrangianAgent,
    ParametricPolicy,
    SingleThresholdPolicyBank,
    combo_weights,
    conveyor_chain,
    lagrangian_update,
    solve_cmdp_lp,
    start_value,
    train_lagrangian,
)
from ccpo.cmdp import TrajectoryStep
from ccpo.trainer import BehaviorConditionSet


class TestComboWeights:
    def test_midpoint_splits_evenly(self):
        assert combo_weights(30.0, 20.0, 40.0) == (0.5, 0.5)

    def test_endpoints_select_one_member(self):
        assert combo_weights(20.0, 20.0, 40.0) == (1.0, 0.0)
        assert combo_weights(40.0, 20.0, 40.0) == (0.0, 1.0)

    def test_extrapolation_goes_negative(self):
        w1, w2 = combo_weights(70.0, 40.0, 60.0)
        assert w1 == pytest.approx(-0.5)
        assert w2 == pytest.approx(1.5)

    @given(st.floats(-100, 200), st.floats(-50, 50), st.floats(51, 150))
    def test_weights_always_sum_to_one(self, eps, e1, e2):
        w1, w2 = combo_weights(eps, e1, e2)
        assert w1 + w2 == pytest.approx(1.0, abs=1e-9)

    def test_equal_pair_rejected(self):
        with pytest.raises(ValueError):
            combo_weights(30.0, 40.0, 40.0)


def _det_bank():
    # member at 20 always plays action 0, member at 40 always action 1
    return SingleThresholdPolicyBank(
        {20.0: lambda s: np.array([1.0, 0.0]),
         40.0: lambda s: np.array([0.0, 1.0])}, n_actions=2)


class TestPolicyBank:
    def test_needs_two_members(self):
        with pytest.raises(ValueError):
            SingleThresholdPolicyBank({20.0: lambda s: np.array([1.0])},
                                      n_actions=1)

    def test_lp_bank_reproduces_solver_policies(self):
        model = conveyor_chain()
        bank = SingleThresholdPolicyBank.from_lp(model, [20.0, 40.0])
        assert np.allclose([bank.members[20.0](s)[1] for s in range(5)],
                           [1, 0, 0, 0, 0])
        assert np.allclose([bank.members[40.0](s)[1] for s in range(5)],
                           [1, 1, 0, 0, 0])

    def test_lp_bank_rejects_infeasible_threshold(self):
        model = conveyor_chain()
        with pytest.raises(ValueError):
            SingleThresholdPolicyBank.from_lp(model, [-1.0, 40.0])

    def test_nearest_pair_brackets_or_clamps(self):
        model = conveyor_chain()
        bank = SingleThresholdPolicyBank.from_lp(model, [20.0, 40.0, 60.0])
        assert bank.nearest_pair(50.0) == (40.0, 60.0)
        assert bank.nearest_pair(40.0) == (20.0, 40.0)
        assert bank.nearest_pair(5.0) == (20.0, 40.0)      # below the bank
        assert bank.nearest_pair(95.0) == (40.0, 60.0)     # above the bank

    def test_from_policies_wraps_conditioned_views(self):
        pols = {20.0: ParametricPolicy(3, 2, 10.0, 70.0),
                60.0: ParametricPolicy(3, 2, 10.0, 70.0)}
        bank = SingleThresholdPolicyBank.from_policies(pols, n_actions=2)
        assert np.allclose(bank.members[20.0](0), [0.5, 0.5])


class TestCombinedPolicy:
    def test_bank_threshold_returns_member_exactly(self):
        pol = CombinedPolicy(_det_bank())
        assert np.array_equal(pol.action_probs(0, 20.0), [1.0, 0.0])
        assert pol.clip_events == 0

    def test_midpoint_of_deterministic_opposites_is_uniform(self):
        pol = CombinedPolicy(_det_bank())
        assert np.allclose(pol.action_probs(0, 30.0), [0.5, 0.5])

    def test_identical_members_make_mixing_a_no_op(self):
        member = lambda s: np.array([0.3, 0.7])
        bank = SingleThresholdPolicyBank({20.0: member, 40.0: member},
                                         n_actions=2)
        pol = CombinedPolicy(bank)
        for eps in (10.0, 20.0, 33.0, 40.0, 65.0):
            assert np.allclose(pol.action_probs(0, eps), [0.3, 0.7])
        assert pol.clip_events == 0

    def test_extrapolation_clips_and_counts(self):
        pol = CombinedPolicy(_det_bank())
        p = pol.action_probs(0, 10.0)      # weights (1.5, -0.5)
        assert np.array_equal(p, [1.0, 0.0])
        assert pol.clip_events == 1
        pol.action_probs(0, 10.0)
        assert pol.clip_events == 2

    def test_output_is_a_distribution_across_the_interval(self):
        rng = np.random.default_rng(0)
        members = {}
        for eps in (20.0, 40.0, 60.0):
            table = rng.random((5, 3)) + 0.05
            table /= table.sum(axis=1, keepdims=True)
            members[eps] = (lambda t: (lambda s: t[int(s)]))(table)
        pol = CombinedPolicy(SingleThresholdPolicyBank(members, n_actions=3))
        for eps in np.linspace(5.0, 80.0, 31):
            for s in range(5):
                p = pol.action_probs(s, float(eps))
                assert np.all(p >= 0.0)
                assert p.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def bank():
    return SingleThresholdPolicyBank.from_lp(conveyor_chain(), [20.0, 40.0])


class TestComboOnChain:
    """Exact start values of the LP-bank mixture on the drift chain."""

    def _table(self, pol, eps):
        return np.array([pol.action_probs(s, eps) for s in range(5)])

    def test_interpolated_threshold_hits_constraint_exactly(self, bank):
        model = conveyor_chain()
        pol = CombinedPolicy(bank)
        table = self._table(pol, 30.0)
        assert start_value(model, table, "cost") == pytest.approx(30.0,
                                                                  abs=1e-8)
        assert start_value(model, table, "reward") == pytest.approx(38.0,
                                                                    abs=1e-8)
        assert pol.clip_events == 0
        # interpolation happens to land on the LP frontier here
        assert solve_cmdp_lp(model, 30.0).value_reward == pytest.approx(38.0)

    def test_extrapolated_threshold_overshoots_budget(self, bank):
        model = conveyor_chain()
        pol = CombinedPolicy(bank)
        table = self._table(pol, 10.0)
        cost = start_value(model, table, "cost")
        assert cost == pytest.approx(20.0, abs=1e-8)
        assert cost - 10.0 == pytest.approx(10.0, abs=1e-8)   # violation
        assert pol.clip_events == 1


def _one_step(cost):
    return [TrajectoryStep(state=0, action=1, next_state=1, reward=0.0,
                           cost=float(cost))]


class TestLagrangianUpdate:
    def _agent(self, lam=0.0):
        return LagrangianAgent(policy=ParametricPolicy(5, 2, 10.0, 70.0),
                               lambdas={20.0: lam})

    def test_dual_ascends_on_violation(self):
        agent = self._agent(lam=1.0)
        out = lagrangian_update(agent, [_one_step(22.0)], 20.0, gamma=0.9,
                                lr_lambda=0.1)
        assert out["lambda"] == pytest.approx(1.2)
        assert out["v_c_hat"] == pytest.approx(22.0)
        assert agent.lambdas[20.0] == pytest.approx(1.2)

    def test_dual_fixed_when_constraint_is_tight(self):
        agent = self._agent(lam=0.7)
        out = lagrangian_update(agent, [_one_step(20.0)], 20.0, gamma=0.9,
                                lr_lambda=0.1)
        assert out["lambda"] == pytest.approx(0.7)

    def test_dual_clipped_at_zero(self):
        agent = self._agent(lam=0.1)
        out = lagrangian_update(agent, [_one_step(0.0)], 20.0, gamma=0.9,
                                lr_lambda=0.1)
        assert out["lambda"] == 0.0

    def test_single_step_batch_leaves_policy_untouched(self):
        # one-sample advantage normalizes to zero
        agent = self._agent()
        theta0 = agent.policy.theta.copy()
        lagrangian_update(agent, [_one_step(5.0)], 20.0, gamma=0.9)
        assert np.array_equal(agent.policy.theta, theta0)

    def test_multi_step_batch_moves_policy(self):
        agent = self._agent()
        theta0 = agent.policy.theta.copy()
        traj = [TrajectoryStep(state=0, action=1, next_state=1, reward=5.0,
                               cost=0.0),
                TrajectoryStep(state=1, action=0, next_state=2, reward=0.0,
                               cost=0.0)]
        lagrangian_update(agent, [traj], 20.0, gamma=0.9, lr_policy=0.5)
        assert not np.array_equal(agent.policy.theta, theta0)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            lagrangian_update(self._agent(), [], 20.0, gamma=0.9)

    def test_unknown_threshold_rejected(self):
        with pytest.raises(KeyError):
            lagrangian_update(self._agent(), [_one_step(1.0)], 30.0,
                              gamma=0.9)


class TestTrainLagrangian:
    def test_seed_determinism(self):
        model = conveyor_chain()
        conds = BehaviorConditionSet(behavior=(20.0,), evaluation=(20.0,))
        a = train_lagrangian(model, conds, iterations=3,
                             episodes_per_condition=2, seed=5, horizon=40)
        b = train_lagrangian(model, conds, iterations=3,
                             episodes_per_condition=2, seed=5, horizon=40)
        c = train_lagrangian(model, conds, iterations=3,
                             episodes_per_condition=2, seed=6, horizon=40)
        assert np.array_equal(a.policy.theta, b.policy.theta)
        assert a.lambdas == b.lambdas
        assert not np.array_equal(a.policy.theta, c.policy.theta)

    def test_dual_rises_under_persistent_violation(self):
        # 40-step discounted cost of the near-uniform policy is ~15, far
        # above a threshold of 1
        model = conveyor_chain()
        conds = BehaviorConditionSet(behavior=(1.0,), evaluation=(1.0,),
                                     eps_low=0.5, eps_high=5.0)
        agent = train_lagrangian(model, conds, iterations=3,
                                 episodes_per_condition=2, seed=0, horizon=40)
        assert agent.lambdas[1.0] > 0.5

    def test_one_dual_per_behavior_threshold(self):
        model = conveyor_chain()
        conds = BehaviorConditionSet()
        agent = train_lagrangian(model, conds, iterations=1,
                                 episodes_per_condition=1, seed=0, horizon=20)
        assert set(agent.lambdas) == {20.0, 40.0, 60.0}
        table = agent.policy.table(35.0)
        assert np.all(table >= 0.0)
        assert np.allclose(table.sum(axis=1), 1.0)
