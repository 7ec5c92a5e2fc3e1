"""Exact solvers for finite CMDPs.

The constrained planning problem max V_r s.t. V_c <= eps is solved as a linear
program over normalized occupancy measures d(s, a) >= 0 with

    sum_a d(s, a) = (1 - gamma) mu0(s) + gamma sum_{s', a'} P(s | s', a') d(s', a')

and the cost constraint sum d * c_bar <= (1 - gamma) eps. Values returned to
discounted-sum units by dividing by (1 - gamma). Policy evaluation and value
iteration are provided as independent routes for cross-checking.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from .cmdp import CmdpModel

# Solver tolerances. Flow conservation is validated to 1e-8 downstream, so the
# LP itself is run tighter than that.
_LP_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}
OCCUPANCY_FLOOR = 1e-12   # below this a state is treated as unvisited


@dataclass(frozen=True)
class OccupancySolution:
    """LP solution: normalized occupancy, extracted policy, values at mu0."""

    status: str                      # "optimal" or "infeasible"
    epsilon: float
    occupancy: np.ndarray | None     # (S, A), sums to 1
    policy: np.ndarray | None        # (S, A) rows sum to 1
    value_reward: float | None
    value_cost: float | None


@dataclass(frozen=True)
class GroundTruth:
    """Per-threshold optimum plus exact Q tables of the extracted policy."""

    solution: OccupancySolution
    q_reward: np.ndarray
    q_cost: np.ndarray


def solve_cmdp_lp(model: CmdpModel, epsilon: float) -> OccupancySolution:
    """Maximize reward value subject to V_c <= epsilon. ``epsilon=inf`` drops
    the cost row. Infeasible thresholds are reported, not raised."""
    s_n, a_n = model.n_states, model.n_actions
    r_bar = model.expected_reward().ravel()
    c_bar = model.expected_cost().ravel()
    one_minus = 1.0 - model.gamma

    # Flow rows: out-flow minus discounted in-flow equals scaled start mass.
    a_eq = np.zeros((s_n, s_n * a_n))
    for s in range(s_n):
        a_eq[s, s * a_n:(s + 1) * a_n] = 1.0
    a_eq -= model.gamma * model.transition.transpose(2, 0, 1).reshape(s_n, s_n * a_n)
    b_eq = one_minus * model.start

    if np.isfinite(epsilon):
        a_ub = c_bar[None, :]
        b_ub = np.array([one_minus * epsilon])
    else:
        a_ub = b_ub = None

    res = linprog(-r_bar, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs", options=dict(_LP_OPTIONS))
    if res.status == 2:
        return OccupancySolution(status="infeasible", epsilon=float(epsilon),
                                 occupancy=None, policy=None,
                                 value_reward=None, value_cost=None)
    if not res.success:
        raise RuntimeError(f"occupancy LP failed: {res.message}")

    d = np.clip(res.x.reshape(s_n, a_n), 0.0, None)
    policy = np.empty_like(d)
    for s in range(s_n):
        mass = d[s].sum()
        if mass > OCCUPANCY_FLOOR:
            policy[s] = d[s] / mass
        else:
            policy[s] = 1.0 / a_n     # unvisited: uniform fallback
    v_r = float(d.ravel() @ r_bar / one_minus)
    v_c = float(d.ravel() @ c_bar / one_minus)
    return OccupancySolution(status="optimal", epsilon=float(epsilon),
                             occupancy=d, policy=policy,
                             value_reward=v_r, value_cost=v_c)


def flow_residual(model: CmdpModel, occupancy: np.ndarray) -> float:
    """Max absolute violation of the occupancy flow constraints."""
    out = occupancy.sum(axis=1)
    inflow = np.einsum("tas,ta->s", model.transition, occupancy)
    return float(np.max(np.abs(out - (1.0 - model.gamma) * model.start
                               - model.gamma * inflow)))


def _policy_matrix(model: CmdpModel, policy) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (model.n_states, model.n_actions):
        raise ValueError(f"policy must be ({model.n_states}, {model.n_actions})")
    return pi


def exact_q(model: CmdpModel, policy, signal: str = "reward") -> np.ndarray:
    """Exact Q of a fixed policy by solving (I - gamma T_pi) q = f_bar."""
    if signal not in ("reward", "cost"):
        raise ValueError(f"unknown signal {signal!r}")
    pi = _policy_matrix(model, policy)
    s_n, a_n = model.n_states, model.n_actions
    f_bar = (model.expected_reward() if signal == "reward"
             else model.expected_cost()).ravel()
    # T_pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')
    t_pi = (model.transition[:, :, :, None] * pi[None, None, :, :]
            ).reshape(s_n * a_n, s_n * a_n)
    q = np.linalg.solve(np.eye(s_n * a_n) - model.gamma * t_pi, f_bar)
    return q.reshape(s_n, a_n)


def exact_v(model: CmdpModel, policy, signal: str = "reward") -> np.ndarray:
    pi = _policy_matrix(model, policy)
    return np.einsum("sa,sa->s", pi, exact_q(model, policy, signal))


def start_value(model: CmdpModel, policy, signal: str = "reward") -> float:
    return float(model.start @ exact_v(model, policy, signal))


def occupancy_of(model: CmdpModel, policy) -> np.ndarray:
    """Normalized (S, A) occupancy of a fixed policy."""
    pi = _policy_matrix(model, policy)
    p_pi = np.einsum("sat,sa->st", model.transition, pi)
    d_state = np.linalg.solve(
        np.eye(model.n_states) - model.gamma * p_pi.T,
        (1.0 - model.gamma) * model.start)
    return d_state[:, None] * pi


def value_iteration(model: CmdpModel, signal: str = "reward",
                    tol: float = 1e-12, max_iter: int = 200_000):
    """Unconstrained optimal control for one signal. Returns (q, v, policy)."""
    if signal not in ("reward", "cost"):
        raise ValueError(f"unknown signal {signal!r}")
    f_bar = (model.expected_reward() if signal == "reward"
             else model.expected_cost())
    v = np.zeros(model.n_states)
    for _ in range(max_iter):
        q = f_bar + model.gamma * model.transition @ v
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < tol * (1.0 - model.gamma):
            v = v_new
            break
        v = v_new
    else:
        raise RuntimeError("value iteration did not converge")
    q = f_bar + model.gamma * model.transition @ v
    greedy = np.zeros_like(q)
    greedy[np.arange(model.n_states), q.argmax(axis=1)] = 1.0
    return q, v, greedy


def per_threshold_ground_truth(model: CmdpModel,
                               thresholds: Sequence[float]
                               ) -> dict[float, GroundTruth]:
    """LP optimum and exact Q tables of the optimal policy, per threshold."""
    out: dict[float, GroundTruth] = {}
    for eps in thresholds:
        sol = solve_cmdp_lp(model, eps)
        if sol.status != "optimal":
            raise ValueError(f"threshold {eps} is infeasible for this model")
        out[float(eps)] = GroundTruth(
            solution=sol,
            q_reward=exact_q(model, sol.policy, "reward"),
            q_cost=exact_q(model, sol.policy, "cost"))
    return out


def dump_solution_csv(solutions: Mapping[float, OccupancySolution] |
                      Mapping[float, GroundTruth], path) -> None:
    """Write occupancy and policy tables, one row per (epsilon, s, a)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "state", "action", "occupancy", "policy",
                         "value_reward", "value_cost"])
        for eps in sorted(solutions):
            sol = solutions[eps]
            if isinstance(sol, GroundTruth):
                sol = sol.solution
            if sol.occupancy is None:
                continue
            s_n, a_n = sol.occupancy.shape
            for s in range(s_n):
                for a in range(a_n):
                    writer.writerow([
                        f"{eps:.12g}", s, a,
                        f"{sol.occupancy[s, a]:.12g}",
                        f"{sol.policy[s, a]:.12g}",
                        f"{sol.value_reward:.12g}",
                        f"{sol.value_cost:.12g}"])
