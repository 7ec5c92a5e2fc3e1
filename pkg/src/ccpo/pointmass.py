"""2-D point-mass tasks on a discrete acceleration grid.

Dynamics are double-integrator with the position updated before the velocity:
x <- x + v dt, then v <- v + a dt (speed-capped). The circle task rewards
orbiting a target radius and charges cost outside an |x| corridor; the run
task rewards progress toward a distant goal and charges cost for leaving a
lateral corridor or exceeding a speed limit. Rewards and costs are evaluated
at the post-step state (the run reward uses the pre- and post-step positions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cmdp import DIST_ATOL, TrajectoryStep

# 9 accelerations: {-a, 0, +a} on each axis, row-major over (ax, ay).
ACCEL_GRID = np.array([(ax, ay) for ax in (-1.0, 0.0, 1.0)
                       for ay in (-1.0, 0.0, 1.0)])
N_ACTIONS = len(ACCEL_GRID)


@dataclass(frozen=True)
class CircleParams:
    radius: float = 1.0
    x_limit: float = 0.6
    dt: float = 0.1
    horizon: int = 100
    accel: float = 1.0
    v_max: float = 1.5
    pos_bound: float = 1.8
    start_radius: float = 0.8
    start_speed: float = 0.6


@dataclass(frozen=True)
class RunParams:
    goal_x: float = 100.0
    goal_y: float = 0.0
    y_limit: float = 0.3
    v_limit: float = 1.0
    dt: float = 0.1
    horizon: int = 100
    accel: float = 1.0
    v_max: float = 2.0
    y_bound: float = 2.0


def circle_reward(state, radius: float = 1.0) -> float:
    """(-y vx + x vy) / (1 + | ||pos|| - radius |): angular momentum about the
    origin, discounted by distance from the target ring."""
    x, y, vx, vy = (float(v) for v in state)
    momentum = -y * vx + x * vy
    return momentum / (1.0 + abs(math.hypot(x, y) - radius))


def circle_cost(state, x_limit: float = 0.6) -> float:
    """Unit cost outside the |x| <= x_limit corridor."""
    return 1.0 if abs(float(state[0])) > x_limit else 0.0


def run_reward_cost(prev_state, state, params: RunParams) -> tuple[float, float]:
    """Reward is the decrease in distance to the goal; cost is one unit per
    violated limit (lateral corridor, speed)."""
    gx, gy = params.goal_x, params.goal_y
    px, py = float(prev_state[0]), float(prev_state[1])
    x, y, vx, vy = (float(v) for v in state)
    reward = math.hypot(px - gx, py - gy) - math.hypot(x - gx, y - gy)
    cost = float(abs(y) > params.y_limit) + float(math.hypot(vx, vy) > params.v_limit)
    return reward, cost


def _digitize(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.digitize(values, edges)


class PointMassEnv:
    """Deterministic point-mass dynamics; randomness enters via reset only."""

    def __init__(self, task: str, params: CircleParams | RunParams | None = None,
                 gamma: float = 0.99):
        if task not in ("circle", "run"):
            raise ValueError(f"unknown point-mass task {task!r}")
        self.task = task
        if params is None:
            params = CircleParams() if task == "circle" else RunParams()
        self.params = params
        self.gamma = float(gamma)
        self.n_actions = N_ACTIONS

    @property
    def horizon(self) -> int:
        return self.params.horizon

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        if self.task == "circle":
            p = self.params
            theta = rng.uniform(0.0, 2.0 * math.pi)
            return np.array([p.start_radius * math.cos(theta),
                             p.start_radius * math.sin(theta),
                             -p.start_speed * math.sin(theta),
                             p.start_speed * math.cos(theta)])
        return np.array([0.0, rng.uniform(-0.1, 0.1), 0.0, 0.0])

    def step(self, state: np.ndarray, action: int
             ) -> tuple[np.ndarray, float, float]:
        if not (0 <= action < N_ACTIONS):
            raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")
        p = self.params
        acc = ACCEL_GRID[action] * p.accel
        pos = state[:2] + state[2:] * p.dt          # position first
        vel = state[2:] + acc * p.dt
        speed = math.hypot(vel[0], vel[1])
        if speed > p.v_max:
            vel = vel * (p.v_max / speed)
        if self.task == "circle":
            pos = np.clip(pos, -p.pos_bound, p.pos_bound)
        else:
            pos[1] = min(max(pos[1], -p.y_bound), p.y_bound)
        nxt = np.concatenate([pos, vel])
        if self.task == "circle":
            reward = circle_reward(nxt, p.radius)
            cost = circle_cost(nxt, p.x_limit)
        else:
            reward, cost = run_reward_cost(state, nxt, p)
        return nxt, reward, cost

    def rollout(self, policy: Callable[[np.ndarray], np.ndarray],
                horizon: int | None, rng: np.random.Generator,
                behavior_threshold: float | None = None) -> list[TrajectoryStep]:
        steps: list[TrajectoryStep] = []
        state = self.reset(rng)
        n = self.params.horizon if horizon is None else horizon
        for _ in range(n):
            probs = np.asarray(policy(state), dtype=float)
            if probs.shape != (N_ACTIONS,) or np.any(probs < -DIST_ATOL) \
                    or abs(probs.sum() - 1.0) > DIST_ATOL:
                raise ValueError("policy emitted an invalid action distribution")
            probs = np.clip(probs, 0.0, None)
            action = int(rng.choice(N_ACTIONS, p=probs / probs.sum()))
            nxt, reward, cost = self.step(state, action)
            steps.append(TrajectoryStep(
                state=state, action=action, next_state=nxt, reward=reward,
                cost=cost, behavior_threshold=behavior_threshold))
            state = nxt
        return steps

    # -- discretization for critics and policies --------------------------

    def cell_indexer(self) -> tuple[int, Callable[[np.ndarray], np.ndarray]]:
        """(n_cells, vectorized state -> cell id) for one-hot features."""
        if self.task == "circle":
            pos_edges = np.array([-0.9, -0.6, -0.25, 0.0, 0.25, 0.6, 0.9])
            n_pos = pos_edges.size + 1
            n_ang, n_spd = 8, 2
            speed_split = 0.3

            def indexer(states) -> np.ndarray:
                s = np.atleast_2d(np.asarray(states, dtype=float))
                xb = _digitize(s[:, 0], pos_edges)
                yb = _digitize(s[:, 1], pos_edges)
                ang = np.floor((np.arctan2(s[:, 3], s[:, 2]) + math.pi)
                               / (2.0 * math.pi / n_ang)).astype(int)
                ang = np.clip(ang, 0, n_ang - 1)
                spd = (np.hypot(s[:, 2], s[:, 3]) > speed_split).astype(int)
                return ((xb * n_pos + yb) * n_ang + ang) * n_spd + spd

            return n_pos * n_pos * n_ang * n_spd, indexer

        y_edges = np.array([-0.6, -0.3, -0.1, 0.1, 0.3, 0.6])
        vx_edges = np.array([-0.2, 0.3, 0.7, 0.95, 1.05, 1.3])
        vy_edges = np.array([-0.3, -0.1, 0.1, 0.3])
        n_y, n_vx, n_vy = y_edges.size + 1, vx_edges.size + 1, vy_edges.size + 1

        def indexer(states) -> np.ndarray:
            s = np.atleast_2d(np.asarray(states, dtype=float))
            yb = _digitize(s[:, 1], y_edges)
            vxb = _digitize(s[:, 2], vx_edges)
            vyb = _digitize(s[:, 3], vy_edges)
            return (yb * n_vx + vxb) * n_vy + vyb

        return n_y * n_vx * n_vy, indexer
