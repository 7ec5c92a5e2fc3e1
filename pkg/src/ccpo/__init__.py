"""Constraint-conditioned policy optimization at desk scale.

A single threshold-conditioned policy pi(a | s, eps) is trained under a few
behavior thresholds and deployed zero-shot at any threshold in the interval,
with a regression-based safety bound on the induced cost. Tabular chain and
gridworld models come with an exact LP oracle; a point-mass environment
provides the continuous tasks.
"""

from .cmdp import (CmdpModel, TrajectoryStep, conveyor_chain, discounted_return,
                   hazard_gridworld, rollout, two_state_chain, undiscounted_sum)
from .oracle import (GroundTruth, OccupancySolution, exact_q, exact_v,
                     flow_residual, occupancy_of, per_threshold_ground_truth,
                     solve_cmdp_lp, start_value, value_iteration)
from .critic import (DEFAULT_FEATURE_DIM, CriticPair, FeatureMap,
                     IndexedFeatureMap, PolyDesign, ThresholdEmbedding,
                     VersatileQ, estimation_error_bound, even_design,
                     fit_B_beta, fit_z_poly, leverage_max, make_critic_pair,
                     msbe_update, normal_quantile, normalize_threshold,
                     polyak_update, prediction_interval,
                     q_distribution_compare, q_value)
from .cvi import (CostFloor, DualSolution, DualSolveError, DualVars,
                  EStepResult, MStepError, MStepResult, MStepTarget,
                  ParametricPolicy, TrustRegionConfig, VariationalPolicy,
                  ball_min_cost, closed_form_q, dual_value, elbo, estep,
                  kl_rows, mstep, solve_dual)
from .pointmass import CircleParams, PointMassEnv, RunParams
from .trainer import (AuditReport, BehaviorConditionSet, MetricsRecord,
                      ReplayBuffer, TrainerConfig, TrainResult, collect,
                      cost_violation, evaluate, safety_bound_audit, train)
from .baselines import (CombinedPolicy, LagrangianAgent,
                        SingleThresholdPolicyBank, combined_policy,
                        combo_weights, lagrangian_update, train_lagrangian)
from .config import ConfigError, ExperimentConfig

__version__ = "0.1.0"

__all__ = [
    "CmdpModel", "TrajectoryStep", "conveyor_chain", "discounted_return",
    "hazard_gridworld", "rollout", "two_state_chain", "undiscounted_sum",
    "GroundTruth", "OccupancySolution", "exact_q", "exact_v", "flow_residual",
    "occupancy_of",
    "per_threshold_ground_truth", "solve_cmdp_lp", "start_value",
    "value_iteration",
    "DEFAULT_FEATURE_DIM", "CriticPair", "FeatureMap", "IndexedFeatureMap",
    "PolyDesign", "ThresholdEmbedding", "VersatileQ", "estimation_error_bound",
    "even_design", "fit_B_beta", "fit_z_poly", "leverage_max",
    "make_critic_pair", "msbe_update", "normal_quantile",
    "normalize_threshold", "polyak_update", "prediction_interval",
    "q_distribution_compare", "q_value",
    "CostFloor", "DualSolution", "DualSolveError", "DualVars", "EStepResult",
    "MStepError", "MStepResult", "MStepTarget", "ParametricPolicy",
    "TrustRegionConfig", "VariationalPolicy", "ball_min_cost",
    "closed_form_q", "dual_value", "elbo", "estep", "kl_rows", "mstep",
    "solve_dual",
    "CircleParams", "PointMassEnv", "RunParams",
    "AuditReport", "BehaviorConditionSet", "MetricsRecord", "ReplayBuffer",
    "TrainerConfig", "TrainResult", "collect", "cost_violation", "evaluate",
    "safety_bound_audit", "train",
    "CombinedPolicy", "LagrangianAgent", "SingleThresholdPolicyBank",
    "combined_policy", "combo_weights", "lagrangian_update",
    "train_lagrangian",
    "ConfigError", "ExperimentConfig",
    "__version__",
]
