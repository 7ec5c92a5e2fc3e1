"""Training loop tying the pieces together.

One iteration: collect conditioned rollouts into per-threshold buffer
partitions, descend the squared Bellman error of both critics (target copies
tracked by Polyak averaging), refit the threshold embeddings, run the E-step
at the behavior thresholds plus uniformly sampled fine-tuning thresholds, and
project the tilted targets back onto the parametric policy in one M-step.
Evaluation reports undiscounted episodic reward and constraint violation over
an evaluation grid, with separate aggregates for unseen thresholds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cmdp import CmdpModel, TrajectoryStep, rollout, undiscounted_sum
from .critic import (CriticPair, IndexedFeatureMap, estimation_error_bound,
                     make_critic_pair, msbe_update, polyak_update)
from .cvi import (EStepResult, MStepTarget, ParametricPolicy,
                  TrustRegionConfig, elbo, estep, mstep)
from .oracle import exact_q, occupancy_of, start_value
from .pointmass import PointMassEnv

DEFAULT_BEHAVIOR = (20.0, 40.0, 60.0)
DEFAULT_EVALUATION = tuple(float(x) for x in range(10, 75, 5))


@dataclass(frozen=True)
class BehaviorConditionSet:
    """Behavior thresholds (trained on), evaluation grid, and the threshold
    interval used for normalization and fine-tuning draws."""

    behavior: tuple[float, ...] = DEFAULT_BEHAVIOR
    evaluation: tuple[float, ...] = DEFAULT_EVALUATION
    eps_low: float = 10.0
    eps_high: float = 70.0

    def __post_init__(self):
        beh = tuple(float(b) for b in self.behavior)
        ev = tuple(float(e) for e in self.evaluation)
        object.__setattr__(self, "behavior", beh)
        object.__setattr__(self, "evaluation", ev)
        if len(beh) == 0:
            raise ValueError("need at least one behavior threshold")
        if len(set(beh)) != len(beh):
            raise ValueError("behavior thresholds must be distinct")
        if any(b < self.eps_low - 1e-9 or b > self.eps_high + 1e-9 for b in beh):
            raise ValueError("behavior thresholds must lie in the interval")
        if ev != tuple(sorted(ev)):
            raise ValueError("evaluation grid must be sorted ascending")
        if self.eps_low >= self.eps_high:
            raise ValueError("need eps_low < eps_high")

    def is_behavior(self, eps: float, atol: float = 1e-9) -> bool:
        return any(abs(eps - b) <= atol for b in self.behavior)

    def generalized(self) -> tuple[float, ...]:
        return tuple(e for e in self.evaluation if not self.is_behavior(e))


def cost_violation(episode_cost: float, epsilon: float) -> float:
    """max(0, undiscounted episode cost minus the threshold)."""
    return max(0.0, float(episode_cost) - float(epsilon))


class UniformConditionedPolicy:
    """Uniform over actions at every state and threshold (warmup driver)."""

    def __init__(self, n_actions: int):
        self.n_actions = int(n_actions)

    def action_probs(self, state, eps: float) -> np.ndarray:
        return np.full(self.n_actions, 1.0 / self.n_actions)

    def conditioned(self, eps: float):
        return lambda state: np.full(self.n_actions, 1.0 / self.n_actions)


class ReplayBuffer:
    """Per-behavior-threshold transition partitions."""

    def __init__(self, behavior_thresholds: Sequence[float],
                 capacity_per_partition: int = 200_000):
        self.thresholds = tuple(float(b) for b in behavior_thresholds)
        self.capacity = int(capacity_per_partition)
        self._parts: dict[float, dict[str, list]] = {
            b: {"states": [], "actions": [], "rewards": [], "costs": [],
                "next_states": []} for b in self.thresholds}

    def _partition(self, eps: float) -> dict[str, list]:
        for b in self.thresholds:
            if abs(b - eps) <= 1e-9:
                return self._parts[b]
        raise KeyError(f"no buffer partition for threshold {eps}")

    def add(self, steps: Sequence[TrajectoryStep], eps: float) -> None:
        part = self._partition(eps)
        for s in steps:
            if s.behavior_threshold is not None \
                    and abs(s.behavior_threshold - eps) > 1e-9:
                raise ValueError("transition tagged with a different threshold "
                                 "than its partition")
            part["states"].append(s.state)
            part["actions"].append(s.action)
            part["rewards"].append(s.reward)
            part["costs"].append(s.cost)
            part["next_states"].append(s.next_state)
        overflow = len(part["actions"]) - self.capacity
        if overflow > 0:
            for key in part:
                del part[key][:overflow]

    def size(self, eps: float) -> int:
        return len(self._partition(eps)["actions"])

    def sample(self, eps: float, size: int,
               rng: np.random.Generator) -> dict[str, np.ndarray]:
        part = self._partition(eps)
        n = len(part["actions"])
        if n == 0:
            raise ValueError(f"empty buffer partition for threshold {eps}")
        idx = rng.integers(0, n, size=size)
        out: dict[str, np.ndarray] = {}
        for key in ("states", "next_states"):
            ref = part[key]
            first = ref[0]
            if np.ndim(first) == 0:
                out[key] = np.array([ref[i] for i in idx])
            else:
                out[key] = np.stack([ref[i] for i in idx])
        for key in ("actions", "rewards", "costs"):
            out[key] = np.array([part[key][i] for i in idx])
        return out


def _rollout_any(env, policy_fn, horizon: int, rng: np.random.Generator,
                 eps: float | None) -> list[TrajectoryStep]:
    if isinstance(env, CmdpModel):
        return rollout(env, policy_fn, horizon, rng, behavior_threshold=eps)
    return env.rollout(policy_fn, horizon, rng, behavior_threshold=eps)


def _env_shape(env, horizon: int | None):
    """(n_actions, gamma, horizon, n_cells, indexer) for either env kind."""
    if isinstance(env, CmdpModel):
        if horizon is None:
            horizon = 100
        return env.n_actions, env.gamma, horizon, env.n_states, None
    if isinstance(env, PointMassEnv):
        n_cells, indexer = env.cell_indexer()
        return env.n_actions, env.gamma, horizon or env.horizon, n_cells, indexer
    raise TypeError(f"unsupported environment type {type(env)!r}")


def collect(env, policy, conditions: BehaviorConditionSet,
            episodes_per_condition: int, rng: np.random.Generator,
            buffer: ReplayBuffer | None = None,
            horizon: int | None = None) -> ReplayBuffer:
    """Roll the conditioned policy at each behavior threshold and append the
    trajectories to that threshold's partition."""
    _, _, horizon, _, _ = _env_shape(env, horizon)
    if buffer is None:
        buffer = ReplayBuffer(conditions.behavior)
    for eps in conditions.behavior:
        fn = policy.conditioned(eps)
        for _ in range(episodes_per_condition):
            steps = _rollout_any(env, fn, horizon, rng, eps)
            buffer.add(steps, eps)
    return buffer


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalRow:
    epsilon: float
    is_behavior: bool
    reward_mean: float
    reward_std: float
    cv_mean: float
    cv_std: float
    episodes: int


@dataclass(frozen=True)
class MetricsRecord:
    """Per-threshold episodic metrics plus grid aggregates. The generalized
    aggregates cover only thresholds outside the behavior set and are None
    when the grid has no such thresholds."""

    task: str
    seed: int
    rows: tuple[EvalRow, ...]
    avg_reward: float
    avg_cv: float
    avg_reward_gen: float | None
    avg_cv_gen: float | None


def evaluate(env, policy, conditions: BehaviorConditionSet, episodes: int,
             rng: np.random.Generator, horizon: int | None = None,
             task: str = "", seed: int = 0) -> MetricsRecord:
    """Monte-Carlo metrics over the evaluation grid: undiscounted episodic
    reward and constraint violation max(0, sum cost - eps)."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    _, _, horizon, _, _ = _env_shape(env, horizon)
    rows = []
    for eps in conditions.evaluation:
        fn = policy.conditioned(eps)
        rewards = np.empty(episodes)
        cvs = np.empty(episodes)
        for k in range(episodes):
            steps = _rollout_any(env, fn, horizon, rng, None)
            rewards[k] = undiscounted_sum(steps, "reward")
            cvs[k] = cost_violation(undiscounted_sum(steps, "cost"), eps)
        rows.append(EvalRow(
            epsilon=eps, is_behavior=conditions.is_behavior(eps),
            reward_mean=float(rewards.mean()), reward_std=float(rewards.std()),
            cv_mean=float(cvs.mean()), cv_std=float(cvs.std()),
            episodes=episodes))
    gen = [r for r in rows if not r.is_behavior]
    return MetricsRecord(
        task=task, seed=seed, rows=tuple(rows),
        avg_reward=float(np.mean([r.reward_mean for r in rows])),
        avg_cv=float(np.mean([r.cv_mean for r in rows])),
        avg_reward_gen=float(np.mean([r.reward_mean for r in gen])) if gen else None,
        avg_cv_gen=float(np.mean([r.cv_mean for r in gen])) if gen else None)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainerConfig:
    conditions: BehaviorConditionSet = field(default_factory=BehaviorConditionSet)
    trust: TrustRegionConfig = field(
        default_factory=lambda: TrustRegionConfig(kappa=0.3, kl_m=0.05,
                                                  alpha_temp=0.5))
    iterations: int = 30
    episodes_per_condition: int = 4
    warmup_episodes: int = 4
    horizon: int | None = None
    critic_lr: float = 0.2
    polyak_rho: float = 0.7
    msbe_steps: int = 50
    batch_size: int = 128
    degree: int = 1
    critic_mode: str = "two_stage"
    estep_samples: int = 8
    estep_batch: int = 256
    mstep_lr: float = 0.5
    mstep_iters: int = 40
    exact_critic: bool = False
    dual_tol: float = 1e-6
    safe_action_bias: float | None = None   # bias policy init toward action 0


@dataclass
class TrainResult:
    policy: ParametricPolicy
    critic: CriticPair
    log: list[dict]
    conditions: BehaviorConditionSet


def _estep_states_exact(model: CmdpModel, policy: ParametricPolicy,
                        eps: float):
    table = policy.table(eps)
    rho = occupancy_of(model, table).sum(axis=1)
    states = np.arange(model.n_states)
    return states, rho / rho.sum()


def _estep_states_sampled(buffer: ReplayBuffer, conditions, batch: int,
                          indexer, rng: np.random.Generator):
    per = max(1, batch // len(conditions.behavior))
    cells = []
    for eps in conditions.behavior:
        if buffer.size(eps) == 0:
            continue
        sampled = buffer.sample(eps, per, rng)["states"]
        if indexer is None:
            cells.append(np.asarray(sampled, dtype=int))
        else:
            cells.append(np.asarray(indexer(sampled), dtype=int))
    if not cells:
        raise ValueError("no data collected yet for the E-step")
    unique, counts = np.unique(np.concatenate(cells), return_counts=True)
    return unique, counts / counts.sum()


def train(env, config: TrainerConfig, seed: int = 0,
          log_path=None) -> TrainResult:
    """Full conditioned-policy optimization loop. Deterministic per seed."""
    conds = config.conditions
    n_actions, gamma, horizon, n_cells, indexer = _env_shape(env, config.horizon)
    if config.exact_critic and not isinstance(env, CmdpModel):
        raise ValueError("exact_critic needs a tabular model")
    rng = np.random.default_rng(seed)
    psi_r = IndexedFeatureMap(n_cells, n_actions, indexer)
    psi_c = IndexedFeatureMap(n_cells, n_actions, indexer)
    critic = make_critic_pair(psi_r, psi_c, conds.behavior, conds.eps_low,
                              conds.eps_high, config.degree, config.critic_mode)
    if config.safe_action_bias is not None:
        policy = ParametricPolicy.biased(n_cells, n_actions, conds.eps_low,
                                         conds.eps_high, action=0,
                                         bias=config.safe_action_bias,
                                         indexer=indexer)
    else:
        policy = ParametricPolicy(n_cells, n_actions, conds.eps_low,
                                  conds.eps_high, indexer)
    buffer = ReplayBuffer(conds.behavior)
    if config.warmup_episodes > 0:
        collect(env, UniformConditionedPolicy(n_actions), conds,
                config.warmup_episodes, rng, buffer, horizon)

    log: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for it in range(config.iterations):
            collect(env, policy, conds, config.episodes_per_condition, rng,
                    buffer, horizon)

            loss_r = loss_c = 0.0
            if config.exact_critic:
                for i, eps in enumerate(conds.behavior):
                    table = policy.table(eps)
                    critic.reward.z_raw[i] = exact_q(env, table, "reward").ravel()
                    critic.cost.z_raw[i] = exact_q(env, table, "cost").ravel()
                critic.reward.z_raw_target = critic.reward.z_raw.copy()
                critic.cost.z_raw_target = critic.cost.z_raw.copy()
            else:
                def next_probs(states, eps):
                    return policy.probs_matrix(states, eps)
                for _ in range(config.msbe_steps):
                    batches = {eps: buffer.sample(eps, config.batch_size, rng)
                               for eps in conds.behavior}
                    loss_r, loss_c = msbe_update(critic, batches, next_probs,
                                                 config.critic_lr, gamma)
                    polyak_update(critic, config.polyak_rho)
            critic.fit_embeddings()

            eps_targets = list(conds.behavior) + list(
                rng.uniform(conds.eps_low, conds.eps_high,
                            config.estep_samples))
            targets: list[MStepTarget] = []
            diag = {"lambda": [], "eta": [], "feasible": [], "slater_ok": []}
            estep_results: dict[float, EStepResult] = {}
            for eps in eps_targets:
                if config.exact_critic:
                    cells, weights = _estep_states_exact(env, policy, eps)
                else:
                    cells, weights = _estep_states_sampled(
                        buffer, conds, config.estep_batch, indexer, rng)
                q_r = critic.reward.q_rows_cells(cells, eps)
                q_c = critic.cost.q_rows_cells(cells, eps)
                pi_old = policy.probs_for_cells(cells, eps)
                res = estep(weights, pi_old, q_r, q_c, eps,
                            config.trust.kappa, states=cells,
                            tol=config.dual_tol)
                targets.append(MStepTarget.from_estep(res))
                estep_results[eps] = res
                diag["lambda"].append(res.dual.duals.lam)
                diag["eta"].append(res.dual.duals.eta)
                diag["feasible"].append(res.feasible)
                diag["slater_ok"].append(res.slater_ok)

            mres = mstep(policy, targets, config.trust, config.mstep_lr,
                         config.mstep_iters)
            policy_new = mres.policy

            row = {
                "iteration": it,
                "msbe_reward": loss_r,
                "msbe_cost": loss_c,
                "lambda_mean": float(np.mean(diag["lambda"])),
                "eta_mean": float(np.mean(diag["eta"])),
                "feasible_fraction": float(np.mean(diag["feasible"])),
                "slater_ok_fraction": float(np.mean(diag["slater_ok"])),
                "mstep_backoffs": mres.backoffs,
                "mstep_kl_max": float(np.max(mres.kl_per_threshold)),
            }
            if config.exact_critic:
                row["elbo"] = {}
                row["slater_ok_by_eps"] = {}
                for eps in conds.behavior:
                    res = estep_results[eps]
                    row["elbo"][f"{eps:g}"] = elbo(
                        res.policy.probs, policy_new, eps,
                        config.trust.alpha_temp, model=env)
                    row["slater_ok_by_eps"][f"{eps:g}"] = res.slater_ok
            policy = policy_new
            log.append(row)
            if log_fh is not None:
                log_fh.write(json.dumps(row) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(policy=policy, critic=critic, log=log, conditions=conds)


# ---------------------------------------------------------------------------
# Safety-bound audit


@dataclass(frozen=True)
class AuditRow:
    epsilon: float
    value_cost: float
    violation: float
    within_bound: bool


@dataclass(frozen=True)
class AuditReport:
    bound: float
    sigma: float
    rows: tuple[AuditRow, ...]
    pass_fraction: float
    approximate: bool     # residual correlations exceeded the independence limit


def safety_bound_audit(env, policy: ParametricPolicy, critic: CriticPair,
                       conditions: BehaviorConditionSet, alpha: float = 0.05,
                       episodes: int = 0,
                       rng: np.random.Generator | None = None) -> AuditReport:
    """Check exact (tabular) or Monte-Carlo cost values of the conditioned
    policy against the regression generalization bound, per grid threshold."""
    emb = critic.cost.embedding
    if emb is None:
        emb = critic.cost.fit_embedding()
    sigma = emb.sigma_max
    n = len(conditions.behavior)
    bound = estimation_error_bound(n, critic.cost.degree, sigma,
                                   critic.cost.psi.k_bound,
                                   critic.cost.psi.dimension, alpha)
    rows = []
    for eps in conditions.evaluation:
        if isinstance(env, CmdpModel):
            v_c = start_value(env, policy.table(eps), "cost")
        else:
            if episodes < 1 or rng is None:
                raise ValueError("Monte-Carlo audit needs episodes and rng")
            fn = policy.conditioned(eps)
            vals = [sum(s.cost * env.gamma ** t for t, s in enumerate(traj))
                    for traj in (env.rollout(fn, None, rng)
                                 for _ in range(episodes))]
            v_c = float(np.mean(vals))
        violation = v_c - eps
        rows.append(AuditRow(epsilon=eps, value_cost=v_c, violation=violation,
                             within_bound=violation <= bound))
    frac = float(np.mean([r.within_bound for r in rows]))
    return AuditReport(bound=bound, sigma=sigma, rows=tuple(rows),
                       pass_fraction=frac, approximate=not emb.independent_dims)
