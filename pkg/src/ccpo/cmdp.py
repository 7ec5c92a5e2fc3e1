"""Finite constrained MDPs: model container, reference instances, rollouts.

Conventions used throughout: a policy over a finite model is either an
(S, A) row-stochastic array or a callable ``state -> action probabilities``.
Values are discounted sums; occupancy measures are normalized to sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Tolerances for validating stochastic objects.
PROB_ATOL = 1e-12
DIST_ATOL = 1e-8


@dataclass(frozen=True)
class TrajectoryStep:
    """One transition. ``behavior_threshold`` tags the condition the acting
    policy was conditioned on, or None for unconditioned rollouts."""

    state: object
    action: int
    next_state: object
    reward: float
    cost: float
    behavior_threshold: float | None = None

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError(f"cost must be nonnegative, got {self.cost}")


@dataclass(frozen=True)
class CmdpModel:
    """Tabular CMDP (P, r, c, mu0, gamma) with (S, A, S) transition/reward/cost
    tensors. Validated on construction."""

    transition: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    start: np.ndarray
    gamma: float

    def __post_init__(self):
        p, r, c, mu = (np.asarray(x, dtype=float) for x in
                       (self.transition, self.reward, self.cost, self.start))
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "start", mu)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition tensor must be (S, A, S), got {p.shape}")
        if r.shape != p.shape or c.shape != p.shape:
            raise ValueError("reward/cost tensors must match transition shape")
        if mu.shape != (p.shape[0],):
            raise ValueError("start distribution must have one entry per state")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(p < -PROB_ATOL) or np.any(p > 1 + PROB_ATOL):
            raise ValueError("transition probabilities must lie in [0, 1]")
        row_sums = p.sum(axis=2)
        if not np.allclose(row_sums, 1.0, atol=PROB_ATOL, rtol=0.0):
            bad = np.unravel_index(np.argmax(np.abs(row_sums - 1.0)), row_sums.shape)
            raise ValueError(f"transition rows must sum to 1; row {bad} sums to "
                             f"{row_sums[bad]!r}")
        if np.any(mu < -PROB_ATOL) or abs(mu.sum() - 1.0) > PROB_ATOL:
            raise ValueError("start distribution must be a probability vector")
        if np.any(c < 0):
            raise ValueError("costs must be nonnegative")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> np.ndarray:
        """Per-(s, a) expected immediate reward, shape (S, A)."""
        return np.einsum("sat,sat->sa", self.transition, self.reward)

    def expected_cost(self) -> np.ndarray:
        """Per-(s, a) expected immediate cost, shape (S, A)."""
        return np.einsum("sat,sat->sa", self.transition, self.cost)

    def absorbing_mask(self) -> np.ndarray:
        """States where every action self-loops with zero reward and cost."""
        s_idx = np.arange(self.n_states)
        self_loop = np.all(self.transition[s_idx, :, s_idx] == 1.0, axis=1)
        silent = np.all((self.reward[s_idx, :, s_idx] == 0.0)
                        & (self.cost[s_idx, :, s_idx] == 0.0), axis=1)
        return self_loop & silent


PolicyLike = Callable[[object], np.ndarray] | np.ndarray


def _action_distribution(policy: PolicyLike, state, n_actions: int) -> np.ndarray:
    probs = policy[state] if isinstance(policy, np.ndarray) else policy(state)
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (n_actions,):
        raise ValueError(f"policy returned shape {probs.shape}, expected ({n_actions},)")
    if np.any(probs < -DIST_ATOL) or abs(probs.sum() - 1.0) > DIST_ATOL:
        raise ValueError(f"policy emitted an invalid distribution at state {state}: "
                         f"{probs}")
    return np.clip(probs, 0.0, None) / probs.sum()


def rollout(model: CmdpModel, policy: PolicyLike, horizon: int,
            rng: np.random.Generator,
            behavior_threshold: float | None = None) -> list[TrajectoryStep]:
    """Sample a trajectory of ``horizon`` steps, stopping early at absorbing
    states. Horizon 0 is an empty trajectory; invalid action distributions
    raise."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if horizon == 0:
        return []
    absorbing = model.absorbing_mask()
    state = int(rng.choice(model.n_states, p=model.start))
    steps: list[TrajectoryStep] = []
    for _ in range(horizon):
        if absorbing[state]:
            break
        probs = _action_distribution(policy, state, model.n_actions)
        action = int(rng.choice(model.n_actions, p=probs))
        nxt = int(rng.choice(model.n_states, p=model.transition[state, action]))
        steps.append(TrajectoryStep(
            state=state, action=action, next_state=nxt,
            reward=float(model.reward[state, action, nxt]),
            cost=float(model.cost[state, action, nxt]),
            behavior_threshold=behavior_threshold))
        state = nxt
    return steps


def discounted_return(steps: Sequence[TrajectoryStep], gamma: float,
                      signal: str = "reward") -> float:
    """sum_t gamma^t f_t for f in {reward, cost}."""
    if signal not in ("reward", "cost"):
        raise ValueError(f"unknown signal {signal!r}")
    vals = np.array([getattr(s, signal) for s in steps], dtype=float)
    if vals.size == 0:
        return 0.0
    return float(vals @ np.power(gamma, np.arange(len(vals))))


def undiscounted_sum(steps: Sequence[TrajectoryStep], signal: str = "cost") -> float:
    if signal not in ("reward", "cost"):
        raise ValueError(f"unknown signal {signal!r}")
    return float(sum(getattr(s, signal) for s in steps))


def as_policy_matrix(policy: PolicyLike, model: CmdpModel) -> np.ndarray:
    """Materialize a callable policy into an (S, A) array."""
    if isinstance(policy, np.ndarray):
        return policy
    return np.stack([_action_distribution(policy, s, model.n_actions)
                     for s in range(model.n_states)])


# ---------------------------------------------------------------------------
# Reference instances


def conveyor_chain(n_states: int = 5, advance_prob: float = 0.9,
                   safe_reward: float = 0.1,
                   risky_bonus: Sequence[float] | None = None,
                   risky_cost: float = 1.0, gamma: float = 0.99) -> CmdpModel:
    """Cyclic-drift chain with uniform start and a per-state risky action.

    The drift is action-independent and doubly stochastic, so the state
    occupancy is exactly uniform under every policy. Action 1 pays a
    state-dependent reward bonus and incurs unit cost; action 0 is free.
    The constrained frontier is therefore a fractional knapsack over which
    states act risky, which makes ground truth hand-computable.
    """
    if risky_bonus is None:
        risky_bonus = np.linspace(1.0, 0.2, n_states)
    risky_bonus = np.asarray(risky_bonus, dtype=float)
    if risky_bonus.shape != (n_states,):
        raise ValueError("risky_bonus must have one entry per state")
    p = np.zeros((n_states, 2, n_states))
    r = np.zeros_like(p)
    c = np.zeros_like(p)
    for s in range(n_states):
        nxt = (s + 1) % n_states
        p[s, :, nxt] = advance_prob
        p[s, :, s] += 1.0 - advance_prob
        r[s, 0, :] = safe_reward
        r[s, 1, :] = safe_reward + risky_bonus[s]
        c[s, 1, :] = risky_cost
    start = np.full(n_states, 1.0 / n_states)
    return CmdpModel(transition=p, reward=r, cost=c, start=start, gamma=gamma)


def two_state_chain(gamma: float = 0.9) -> CmdpModel:
    """Deterministic two-state loop where only state 0 offers a real choice
    (state 1's actions are identical), so stationary policies form a 1-D
    family. Used for enumeration and fixed-point checks."""
    p = np.zeros((2, 2, 2))
    p[0, :, 1] = 1.0
    p[1, :, 0] = 1.0
    r = np.zeros_like(p)
    c = np.zeros_like(p)
    r[0, 0, :] = 0.2          # safe
    r[0, 1, :] = 1.0          # risky
    c[0, 1, :] = 1.0
    r[1, :, :] = 0.1
    start = np.array([1.0, 0.0])
    return CmdpModel(transition=p, reward=r, cost=c, start=start, gamma=gamma)


def hazard_gridworld(width: int = 5, height: int = 5, slip: float = 0.1,
                     gamma: float = 0.95, goal_reward: float = 1.0,
                     hazards: Sequence[tuple[int, int]] | None = None) -> CmdpModel:
    """Small gridworld with hazard cells that cost 1 on entry and an absorbing
    goal in the far corner. Start is the near corner. Intended as an oracle
    target, not a training task."""
    if width * height > 100:
        raise ValueError("gridworld capped at 100 states")
    if hazards is None:
        # Default band of hazards across the middle row, leaving one gap.
        mid = height // 2
        hazards = [(x, mid) for x in range(width) if x != width - 1]
    hazard_set = {tuple(h) for h in hazards}
    n = width * height
    goal = n - 1

    def idx(x, y):
        return y * width + x

    moves = [(0, -1), (0, 1), (-1, 0), (1, 0)]
    p = np.zeros((n, 4, n))
    r = np.zeros_like(p)
    c = np.zeros_like(p)
    for y in range(height):
        for x in range(width):
            s = idx(x, y)
            if s == goal:
                p[s, :, s] = 1.0
                continue
            for a in range(4):
                for b, prob in [(a, 1.0 - slip)] + [
                        (o, slip / 3.0) for o in range(4) if o != a]:
                    dx, dy = moves[b]
                    nx = min(max(x + dx, 0), width - 1)
                    ny = min(max(y + dy, 0), height - 1)
                    t = idx(nx, ny)
                    p[s, a, t] += prob
                    if (nx, ny) in hazard_set:
                        c[s, a, t] = 1.0
                    if t == goal:
                        r[s, a, t] = goal_reward
    start = np.zeros(n)
    start[idx(0, 0)] = 1.0
    return CmdpModel(transition=p, reward=r, cost=c, start=start, gamma=gamma)
