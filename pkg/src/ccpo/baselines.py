"""Baselines for threshold generalization.

combo: train (or solve) one policy per behavior threshold, then serve an
unseen threshold by linearly mixing the two nearest members; extrapolation
weights can go negative and are clipped to zero and renormalized, with a
counted clip event. lagrangian: a single threshold-conditioned policy trained
by policy gradient on r - lambda c with one dual variable per behavior
threshold, ascended on the discounted cost gap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cmdp import CmdpModel, discounted_return
from .cvi import ParametricPolicy
from .oracle import solve_cmdp_lp
from .trainer import BehaviorConditionSet, _env_shape, _rollout_any

log = logging.getLogger(__name__)


def combo_weights(eps: float, eps1: float, eps2: float) -> tuple[float, float]:
    """Linear interpolation weights over a threshold pair; sums to 1 exactly.
    Outside [eps1, eps2] one weight is negative (extrapolation)."""
    if eps1 == eps2:
        raise ValueError("threshold pair must be distinct")
    w1 = (eps2 - eps) / (eps2 - eps1)
    return w1, 1.0 - w1


class SingleThresholdPolicyBank:
    """Sorted bank of per-threshold policies as ``state -> probs`` callables."""

    def __init__(self, members: dict[float, Callable], n_actions: int):
        if len(members) < 2:
            raise ValueError("mixing needs at least two bank members")
        self.thresholds = np.array(sorted(members), dtype=float)
        self.members = {float(k): members[k] for k in members}
        self.n_actions = int(n_actions)

    @classmethod
    def from_lp(cls, model: CmdpModel,
                thresholds: Sequence[float]) -> "SingleThresholdPolicyBank":
        members: dict[float, Callable] = {}
        for eps in thresholds:
            sol = solve_cmdp_lp(model, eps)
            if sol.status != "optimal":
                raise ValueError(f"bank threshold {eps} infeasible")
            table = sol.policy
            members[float(eps)] = (lambda t: (lambda s: t[int(s)]))(table)
        return cls(members, model.n_actions)

    @classmethod
    def from_policies(cls, policies: dict[float, ParametricPolicy],
                      n_actions: int) -> "SingleThresholdPolicyBank":
        members = {float(eps): pol.conditioned(eps)
                   for eps, pol in policies.items()}
        return cls(members, n_actions)

    def nearest_pair(self, eps: float) -> tuple[float, float]:
        t = self.thresholds
        idx = int(np.searchsorted(t, eps))
        if idx <= 0:
            return float(t[0]), float(t[1])
        if idx >= t.size:
            return float(t[-2]), float(t[-1])
        return float(t[idx - 1]), float(t[idx])


class CombinedPolicy:
    """Mixture of the two nearest bank members, clip-and-renormalized when
    extrapolation weights go negative."""

    def __init__(self, bank: SingleThresholdPolicyBank):
        self.bank = bank
        self.n_actions = bank.n_actions
        self.clip_events = 0

    def action_probs(self, state, eps: float) -> np.ndarray:
        e1, e2 = self.bank.nearest_pair(eps)
        w1, w2 = combo_weights(eps, e1, e2)
        p = w1 * np.asarray(self.bank.members[e1](state), dtype=float) \
            + w2 * np.asarray(self.bank.members[e2](state), dtype=float)
        if np.any(p < 0.0):
            self.clip_events += 1
            log.debug("clipped negative mixture weights at eps=%s state=%s",
                      eps, state)
            p = np.clip(p, 0.0, None)
        total = p.sum()
        if total <= 0.0:
            return np.full(self.n_actions, 1.0 / self.n_actions)
        return p / total

    def conditioned(self, eps: float) -> Callable:
        return lambda state: self.action_probs(state, eps)


def combined_policy(bank: SingleThresholdPolicyBank,
                    eps: float) -> Callable:
    """Mixture policy at one threshold (see CombinedPolicy)."""
    return CombinedPolicy(bank).conditioned(eps)


# ---------------------------------------------------------------------------
# Lagrangian agent


@dataclass
class LagrangianAgent:
    """Threshold-conditioned softmax policy plus one dual variable per
    behavior threshold."""

    policy: ParametricPolicy
    lambdas: dict[float, float]

    def dual_for(self, eps: float) -> float:
        for k in self.lambdas:
            if abs(k - eps) <= 1e-9:
                return self.lambdas[k]
        raise KeyError(f"no dual variable for threshold {eps}")


def lagrangian_update(agent: LagrangianAgent, trajectories, eps: float,
                      gamma: float, lr_policy: float = 0.05,
                      lr_lambda: float = 0.05) -> dict:
    """One on-policy update at one behavior threshold.

    Policy: REINFORCE on r - lambda c with discounted reward-to-go and a
    batch-mean baseline (advantages are std-normalized). Dual:
    lambda <- max(0, lambda + lr * (V_c_hat - eps)) with V_c_hat the mean
    discounted cost return.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    lam = agent.dual_for(eps)
    pol = agent.policy
    t_eps = pol.t(eps)

    cells_all, actions_all, adv_all = [], [], []
    for traj in trajectories:
        signal = np.array([s.reward - lam * s.cost for s in traj])
        rtg = np.zeros(len(traj))
        run = 0.0
        for i in range(len(traj) - 1, -1, -1):
            run = signal[i] + gamma * run
            rtg[i] = run
        cells_all.append(pol.cells_of([s.state for s in traj]))
        actions_all.append(np.array([s.action for s in traj], dtype=int))
        adv_all.append(rtg)
    cells = np.concatenate(cells_all)
    actions = np.concatenate(actions_all)
    adv = np.concatenate(adv_all)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    probs = pol.probs_for_cells(cells, eps)
    g_logits = -probs * adv[:, None]
    g_logits[np.arange(len(actions)), actions] += adv
    g_logits /= len(trajectories)
    grad = np.zeros_like(pol.theta)
    np.add.at(grad[:, :, 0], cells, g_logits)
    np.add.at(grad[:, :, 1], cells, g_logits * t_eps)
    pol.theta += lr_policy * grad

    v_c_hat = float(np.mean([discounted_return(t, gamma, "cost")
                             for t in trajectories]))
    new_lam = max(0.0, lam + lr_lambda * (v_c_hat - eps))
    for k in list(agent.lambdas):
        if abs(k - eps) <= 1e-9:
            agent.lambdas[k] = new_lam
    return {"lambda": new_lam, "v_c_hat": v_c_hat}


def train_lagrangian(env, conditions: BehaviorConditionSet, iterations: int,
                     episodes_per_condition: int, seed: int = 0,
                     horizon: int | None = None, lr_policy: float = 0.05,
                     lr_lambda: float = 0.05) -> LagrangianAgent:
    """On-policy loop cycling through the behavior thresholds."""
    n_actions, gamma, horizon, n_cells, indexer = _env_shape(env, horizon)
    rng = np.random.default_rng(seed)
    agent = LagrangianAgent(
        policy=ParametricPolicy(n_cells, n_actions, conditions.eps_low,
                                conditions.eps_high, indexer),
        lambdas={float(e): 0.0 for e in conditions.behavior})
    for _ in range(iterations):
        for eps in conditions.behavior:
            fn = agent.policy.conditioned(eps)
            trajs = [_rollout_any(env, fn, horizon, rng, eps)
                     for _ in range(episodes_per_condition)]
            lagrangian_update(agent, trajs, eps, gamma, lr_policy, lr_lambda)
    return agent
