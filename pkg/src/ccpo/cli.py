"""Command-line front end: reproducible runs, verification suites, and
bound-table emission. All randomness flows from the config seed."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .baselines import CombinedPolicy, SingleThresholdPolicyBank, train_lagrangian
from .cmdp import CmdpModel
from .config import ConfigError, ExperimentConfig
from .oracle import solve_cmdp_lp
from .trainer import (BehaviorConditionSet, EvalRow, MetricsRecord, evaluate,
                      train)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

# salt for the evaluation RNG stream so it never aliases the training stream
_EVAL_STREAM = 0x5EED

_LOG = logging.getLogger("ccpo.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}


def _configure_logging():
    name = os.environ.get("CCPO_LOG_LEVEL", "info").strip().lower()
    level = _LOG_LEVELS.get(name)
    if level is None:
        level = logging.INFO
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    if name not in _LOG_LEVELS:
        _LOG.warning("unknown CCPO_LOG_LEVEL %r, using info", name)


# ---------------------------------------------------------------------------
# Metrics CSV

CSV_HEADER = "task,seed,epsilon,is_behavior,reward_mean,reward_std,cv_mean,cv_std"


def _csv_num(x: float) -> str:
    return f"{float(x):.12g}"


def metrics_csv_text(records: list[MetricsRecord]) -> str:
    """Locale-free CSV, 12 significant digits, '\\n' newlines."""
    lines = [CSV_HEADER]
    for rec in records:
        for row in rec.rows:
            lines.append(",".join([
                rec.task, str(rec.seed), _csv_num(row.epsilon),
                "true" if row.is_behavior else "false",
                _csv_num(row.reward_mean), _csv_num(row.reward_std),
                _csv_num(row.cv_mean), _csv_num(row.cv_std)]))
    return "\n".join(lines) + "\n"


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# run

def _oracle_record(model: CmdpModel, conditions: BehaviorConditionSet,
                   task: str, seed: int) -> MetricsRecord:
    rows = []
    for eps in conditions.evaluation:
        sol = solve_cmdp_lp(model, eps)
        if sol.status != "optimal":
            reward, cv = float("nan"), float("nan")
        else:
            reward = sol.value_reward
            cv = max(0.0, sol.value_cost - eps)
        rows.append(EvalRow(epsilon=eps, is_behavior=conditions.is_behavior(eps),
                            reward_mean=reward, reward_std=0.0,
                            cv_mean=cv, cv_std=0.0, episodes=0))
    gen = [r for r in rows if not r.is_behavior]
    return MetricsRecord(
        task=task, seed=seed, rows=tuple(rows),
        avg_reward=float(np.mean([r.reward_mean for r in rows])),
        avg_cv=float(np.mean([r.cv_mean for r in rows])),
        avg_reward_gen=float(np.mean([r.reward_mean for r in gen])) if gen else None,
        avg_cv_gen=float(np.mean([r.cv_mean for r in gen])) if gen else None)


def _combo_policy(env, cfg: ExperimentConfig, seed: int) -> CombinedPolicy:
    conditions = cfg.conditions()
    if isinstance(env, CmdpModel):
        bank = SingleThresholdPolicyBank.from_lp(env, conditions.behavior)
        return CombinedPolicy(bank)
    # continuous tasks: one single-threshold CVI run per behavior epsilon
    members = {}
    base = cfg.trainer_config()
    for i, eps in enumerate(sorted(conditions.behavior)):
        single = BehaviorConditionSet(
            behavior=(eps,), evaluation=(eps,),
            eps_low=conditions.eps_low, eps_high=conditions.eps_high)
        tc = dataclasses.replace(base, conditions=single, degree=0)
        members[eps] = train(env, tc, seed=seed * 131 + i).policy
    return CombinedPolicy(
        SingleThresholdPolicyBank.from_policies(members, env.n_actions))


def _train_policy(env, cfg: ExperimentConfig, seed: int, out_dir: str | None):
    algo = cfg["algorithm"]
    if algo == "ccpo":
        log_path = None
        if out_dir is not None:
            log_path = os.path.join(
                out_dir, f"train_{cfg['task.name']}_seed{seed}.jsonl")
        return train(env, cfg.trainer_config(), seed=seed,
                     log_path=log_path).policy
    if algo == "lagrangian":
        agent = train_lagrangian(
            env, cfg.conditions(), iterations=cfg["baseline.iterations"],
            episodes_per_condition=cfg["train.episodes_per_condition"],
            seed=seed, horizon=cfg["task.horizon"],
            lr_policy=cfg["baseline.lr_policy"],
            lr_lambda=cfg["baseline.lr_lambda"])
        return agent.policy
    if algo == "combo":
        return _combo_policy(env, cfg, seed)
    raise ConfigError(f"unhandled algorithm {algo!r}", key="algorithm")


def run_one(config_text: str, seed: int,
            out_dir: str | None = None) -> MetricsRecord:
    """One full train+evaluate pass for a single seed. Takes the serialized
    config so it can cross a process boundary untouched."""
    cfg = ExperimentConfig.from_text(config_text)
    env = cfg.build_task()
    task = cfg["task.name"]
    if cfg["algorithm"] == "oracle":
        if not isinstance(env, CmdpModel):
            raise ConfigError("algorithm=oracle needs a tabular task",
                              key="algorithm")
        return _oracle_record(env, cfg.conditions(), task, seed)
    policy = _train_policy(env, cfg, seed, out_dir)
    rng = np.random.default_rng([seed, _EVAL_STREAM])
    return evaluate(env, policy, cfg.conditions(), cfg["eval.episodes"], rng,
                    cfg["task.horizon"], task=task, seed=seed)


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seeds = (args.seed,) if args.seed is not None else cfg.seeds()
    out_dir = args.out if args.out is not None else cfg["out.dir"]
    os.makedirs(out_dir, exist_ok=True)
    text = cfg.serialize()
    if args.parallel > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            records = list(pool.map(run_one, [text] * len(seeds), seeds,
                                    [out_dir] * len(seeds)))
    else:
        records = [run_one(text, s, out_dir) for s in seeds]
    task, algo = cfg["task.name"], cfg["algorithm"]
    for rec in records:
        path = os.path.join(out_dir, f"metrics_{task}_{algo}_seed{rec.seed}.csv")
        _write_text(path, metrics_csv_text([rec]))
        _LOG.info("seed %d: avg reward %.4g, avg cv %.4g", rec.seed,
                  rec.avg_reward, rec.avg_cv)
    merged = os.path.join(out_dir, "metrics.csv")
    _write_text(merged, metrics_csv_text(records))
    print(f"wrote {merged}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify / bounds / oracle-compare

SUITES = ("estep", "dual", "bounds", "coverage", "elbo", "safety")


def cmd_verify(args) -> int:
    from . import verify

    names = SUITES if args.suite == "all" else (args.suite,)
    all_ok = True
    for name in names:
        result = verify.run_suite(name, seed=args.seed)
        for line in result.lines:
            print(f"[{name}] {line}")
        status = "pass" if result.passed else "FAIL"
        print(f"[{name}] {status}")
        all_ok = all_ok and result.passed
    return EXIT_OK if all_ok else EXIT_RUNTIME


def cmd_bounds(args) -> int:
    from .critic import fit_B_beta, leverage_max

    degrees = sorted(int(d) for d in args.degrees.split(","))
    lines = ["degree,n_points,leverage,b,beta"]
    ok = True
    for p in degrees:
        n_range = range(p + 1, args.n_max + 1)
        fit = fit_B_beta(p, n_range)
        for n in fit.n_range:
            lev = leverage_max(p, n)
            envelope = fit.b / n ** fit.beta
            if lev > envelope + 1e-12:
                ok = False
            lines.append(f"{p},{n},{lev:.12g},{fit.b:.12g},{fit.beta:.12g}")
        print(f"p={p}: B={fit.b:.6g} beta={fit.beta:.6g} "
              f"max_violation={fit.max_violation:.3g}")
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    if not ok:
        print("envelope does not dominate the computed leverages", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_oracle_compare(args) -> int:
    from .oracle import per_threshold_ground_truth
    from .critic import q_distribution_compare
    from .trainer import TrainResult  # noqa: F401  (documentation pointer)

    cfg = ExperimentConfig.load(args.config)
    env = cfg.build_task()
    if not isinstance(env, CmdpModel):
        raise ConfigError("oracle-compare needs a tabular task", key="task.name")
    result = train(env, cfg.trainer_config(), seed=cfg["seed"])
    truth = per_threshold_ground_truth(env, cfg.conditions().evaluation)
    rows = q_distribution_compare(result.critic, truth,
                                  states=range(env.n_states))
    lines = ["epsilon,signal,mae,wasserstein"]
    for row in rows:
        lines.append(f"{row.epsilon:.12g},{row.signal},"
                     f"{row.mae:.12g},{row.wasserstein:.12g}")
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccpo",
        description="Versatile safe-RL laboratory: threshold-conditioned "
                    "policies on tabular and point-mass tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate per the config")
    p_run.add_argument("--config", required=True, help="config file path")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config seed(s)")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--parallel", type=int, default=1,
                       help="worker processes for multi-seed runs")
    p_run.set_defaults(fn=cmd_run)

    p_verify = sub.add_parser("verify", help="run a verification suite")
    p_verify.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(fn=cmd_verify)

    p_bounds = sub.add_parser("bounds",
                              help="emit the leverage/envelope table")
    p_bounds.add_argument("--degrees", default="0,1,2,3")
    p_bounds.add_argument("--n-max", type=int, default=20)
    p_bounds.add_argument("--out", default="bounds.csv")
    p_bounds.set_defaults(fn=cmd_bounds)

    p_cmp = sub.add_parser("oracle-compare",
                           help="train briefly, compare the critic to exact Q")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--out", default="oracle_compare.csv")
    p_cmp.set_defaults(fn=cmd_oracle_compare)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001  (CLI boundary)
        module = type(exc).__module__
        print(f"error [{module}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
