"""Flat key=value experiment configuration.

The format is deliberately plain: one `key = value` pair per line, dotted
prefixes for grouping, '#' comments, no nesting. Unknown keys are rejected
so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Callable

from .cvi import TrustRegionConfig
from .trainer import BehaviorConditionSet, TrainerConfig


class ConfigError(ValueError):
    """Invalid configuration; `key` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_float_list(raw: str) -> tuple[float, ...]:
    parts = [p for p in raw.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in raw.replace(",", " ").split() if p)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.12g}"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


_REQUIRED = object()

# key -> (parser, default). _REQUIRED entries must appear in the file.
_SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "task.name": (str, _REQUIRED),
    "task.gamma": (float, _REQUIRED),
    "task.horizon": (int, 100),
    "algorithm": (str, "ccpo"),
    "seed": (int, 0),
    "seeds": (_parse_int_list, ()),
    "out.dir": (str, "runs"),
    "conditions.behavior": (_parse_float_list, (20.0, 40.0, 60.0)),
    "conditions.evaluation": (_parse_float_list,
                              tuple(float(e) for e in range(10, 75, 5))),
    "conditions.low": (float, 10.0),
    "conditions.high": (float, 70.0),
    "trust.kappa": (float, 0.3),
    "trust.kl_m": (float, 0.05),
    "trust.alpha_temp": (float, 0.5),
    "critic.degree": (int, 1),
    "critic.lr": (float, 0.2),
    "critic.polyak": (float, 0.7),
    "critic.mode": (str, "two_stage"),
    "critic.k_bound": (float, 1.0),
    "train.iterations": (int, 30),
    "train.episodes_per_condition": (int, 4),
    "train.warmup_episodes": (int, 4),
    "train.msbe_steps": (int, 50),
    "train.batch_size": (int, 128),
    "train.estep_samples": (int, 8),
    "train.estep_batch": (int, 256),
    "train.mstep_lr": (float, 0.5),
    "train.mstep_iters": (int, 40),
    "train.exact_critic": (_parse_bool, False),
    "train.dual_tol": (float, 1e-6),
    "train.safe_action_bias": (float, 0.0),
    "baseline.iterations": (int, 150),
    "baseline.lr_policy": (float, 0.05),
    "baseline.lr_lambda": (float, 0.05),
    "eval.episodes": (int, 40),
}

_TASKS = ("chain", "two_state", "gridworld", "circle", "run")
_ALGORITHMS = ("ccpo", "combo", "lagrangian", "oracle")
_CRITIC_MODES = ("two_stage", "joint")


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> string map. Rejects malformed lines and duplicate keys."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"duplicate config key {key!r}", key=key)
        raw[key] = value
    return raw


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def from_raw(cls, raw: dict[str, str]) -> "ExperimentConfig":
        for key in raw:
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r}", key=key)
        values: dict[str, Any] = {}
        for key, (parser, default) in _SCHEMA.items():
            if key in raw:
                try:
                    values[key] = parser(raw[key])
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}", key=key) from exc
            elif default is _REQUIRED:
                raise ConfigError(f"missing required config key {key!r}", key=key)
            else:
                values[key] = default
        cfg = cls(values)
        cfg._validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_raw(parse_config_text(text))

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def _validate(self):
        v = self.values
        if v["task.name"] not in _TASKS:
            raise ConfigError(
                f"task.name must be one of {_TASKS}, got {v['task.name']!r}",
                key="task.name")
        if v["algorithm"] not in _ALGORITHMS:
            raise ConfigError(
                f"algorithm must be one of {_ALGORITHMS}, got {v['algorithm']!r}",
                key="algorithm")
        if v["critic.mode"] not in _CRITIC_MODES:
            raise ConfigError(
                f"critic.mode must be one of {_CRITIC_MODES}", key="critic.mode")
        if not (0.0 < v["task.gamma"] < 1.0):
            raise ConfigError("task.gamma must lie in (0, 1)", key="task.gamma")
        try:
            self.conditions()
        except ValueError as exc:
            raise ConfigError(f"bad condition set: {exc}",
                              key="conditions.behavior") from exc

    def serialize(self) -> str:
        """Canonical text: every key, sorted, 'key = value' lines."""
        lines = [f"{key} = {_fmt(self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def conditions(self) -> BehaviorConditionSet:
        v = self.values
        return BehaviorConditionSet(
            behavior=tuple(v["conditions.behavior"]),
            evaluation=tuple(v["conditions.evaluation"]),
            eps_low=v["conditions.low"],
            eps_high=v["conditions.high"])

    def trust(self) -> TrustRegionConfig:
        v = self.values
        return TrustRegionConfig(kappa=v["trust.kappa"], kl_m=v["trust.kl_m"],
                                 alpha_temp=v["trust.alpha_temp"])

    def seeds(self) -> tuple[int, ...]:
        listed = self.values["seeds"]
        return tuple(listed) if listed else (self.values["seed"],)

    def trainer_config(self) -> TrainerConfig:
        v = self.values
        bias = v["train.safe_action_bias"]
        return TrainerConfig(
            conditions=self.conditions(),
            trust=self.trust(),
            iterations=v["train.iterations"],
            episodes_per_condition=v["train.episodes_per_condition"],
            warmup_episodes=v["train.warmup_episodes"],
            horizon=v["task.horizon"],
            critic_lr=v["critic.lr"],
            polyak_rho=v["critic.polyak"],
            msbe_steps=v["train.msbe_steps"],
            batch_size=v["train.batch_size"],
            degree=v["critic.degree"],
            critic_mode=v["critic.mode"],
            estep_samples=v["train.estep_samples"],
            estep_batch=v["train.estep_batch"],
            mstep_lr=v["train.mstep_lr"],
            mstep_iters=v["train.mstep_iters"],
            exact_critic=v["train.exact_critic"],
            dual_tol=v["train.dual_tol"],
            safe_action_bias=bias if bias > 0.0 else None)

    def build_task(self):
        """Instantiate the environment / model named by task.name."""
        from . import cmdp, pointmass

        name = self.values["task.name"]
        gamma = self.values["task.gamma"]
        if name == "chain":
            return cmdp.conveyor_chain(gamma=gamma)
        if name == "two_state":
            return cmdp.two_state_chain(gamma=gamma)
        if name == "gridworld":
            return cmdp.hazard_gridworld(gamma=gamma)
        if name == "circle":
            return pointmass.PointMassEnv("circle", gamma=gamma)
        if name == "run":
            return pointmass.PointMassEnv("run", gamma=gamma)
        raise ConfigError(f"unhandled task {name!r}", key="task.name")


def config_fields() -> dict[str, Any]:
    """Key -> default (or the required marker); exposed for docs and tests."""
    return {k: (None if d is _REQUIRED else d) for k, (_, d) in _SCHEMA.items()}
