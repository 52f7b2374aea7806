"""Experiment configuration and its flat key=value file format.

One key per line, no nesting, so configs diff cleanly across runs. Unknown
keys are rejected and round-trips are lossless (floats are written with
repr precision).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .envs import KINDS
from .errors import ConfigError

POLICY_KINDS = ("cnn", "attention", "input_masked", "sparse_masked")


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 3
    minibatch_size: int = 512
    rollout_len: int = 256
    n_envs: int = 8
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lambda_mask: float = 1.0
    alpha: float = 0.05
    total_timesteps: int = 400_000
    seed: int = 0
    advantage_norm: bool = True
    eval_every: int = 20

    def validate(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("gamma", "gae_lambda", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "minibatch_size", "rollout_len", "n_envs", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.total_timesteps < self.rollout_len * self.n_envs:
            raise ConfigError("total_timesteps must cover at least one rollout")


@dataclass
class ExperimentConfig:
    env_kind: str = "DodgeGrid"
    policy: str = "sparse_masked"
    n_train_levels: int = 20
    n_test_levels: int = 20
    precision: str = "float32"
    out_dir: str = "runs"
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def validate(self) -> None:
        if self.env_kind not in KINDS:
            raise ConfigError(f"env_kind must be one of {KINDS}, got {self.env_kind!r}")
        if self.policy not in POLICY_KINDS:
            raise ConfigError(f"policy must be one of {POLICY_KINDS}, got {self.policy!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.n_train_levels < 1 or self.n_test_levels < 1:
            raise ConfigError("split sizes must be at least 1")
        self.ppo.validate()


_TOP_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "ppo"}
_PPO_FIELDS = {f.name: f for f in dataclasses.fields(PPOConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, ftype: str):
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as a boolean")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"cannot parse {raw!r} as {ftype}") from e
    return raw


def to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for name in _TOP_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(cfg, name))}")
    for name in _PPO_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(cfg.ppo, name))}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in _TOP_FIELDS:
            ftype = _TOP_FIELDS[key].type
            setattr(cfg, key, _parse_value(raw, _type_name(ftype)))
        elif key in _PPO_FIELDS:
            ftype = _PPO_FIELDS[key].type
            setattr(cfg.ppo, key, _parse_value(raw, _type_name(ftype)))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    cfg.validate()
    return cfg


def _type_name(ftype) -> str:
    return ftype if isinstance(ftype, str) else ftype.__name__


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(to_text(cfg), encoding="utf-8")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return from_text(path.read_text(encoding="utf-8"))
