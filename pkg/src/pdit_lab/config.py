"""Training configuration dataclasses and strict JSON (de)serialisation."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .env import EnvConfig
from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class AblationFlags:
    no_clip_align: bool = False
    no_interleave: bool = False
    no_supervision: bool = False


@dataclass(frozen=True)
class PretrainConfig:
    enabled: bool = False
    batch: int = 512
    lr: float = 1e-4
    steps: int = 200


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "pdit"
    total_env_steps: int = 300_000
    n_envs: int = 8
    n_steps: int = 256
    minibatch: int = 64
    epochs_per_update: int = 4
    lr: float = 3e-4
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    normalize_advantages: bool = True
    max_grad_norm: float | None = 0.5
    dedupe_missions: bool = False
    freeze_perception: bool = False
    eval_every: int = 10
    eval_episodes: int = 100
    eval_seed_base: int = 1_000_000_007
    checkpoint_every: int = 10
    variance_window: int = 100
    success_threshold: float = 0.8
    stop_at_success: float | None = None
    n_workers: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if self.arch not in ("pdit", "stacked", "baseline"):
            raise ConfigError(f"config.arch: must be pdit|stacked|baseline, got {self.arch!r}")
        for name in ("total_env_steps", "n_envs", "n_steps", "minibatch", "epochs_per_update",
                     "eval_every", "eval_episodes", "checkpoint_every", "variance_window", "n_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config.{name}: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("config.lr: must be > 0")
        if (self.n_envs * self.n_steps) % self.minibatch:
            raise ConfigError("config.minibatch: must divide n_envs * n_steps")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigError("config.max_grad_norm: must be > 0 or null")
        if self.pretrain.batch < 1 or self.pretrain.steps < 0 or self.pretrain.lr <= 0:
            raise ConfigError("config.pretrain: batch >= 1, steps >= 0, lr > 0")
        if self.ablation.no_interleave and self.arch == "baseline":
            raise ConfigError("config.ablation.no_interleave: not applicable to the baseline arch")
        if self.seed < 0 or self.seed >= 1 << 64:
            raise ConfigError("config.seed: must be an unsigned 64-bit integer")

    # effective settings after ablation flags
    @property
    def effective_arch(self) -> str:
        return "stacked" if self.ablation.no_interleave else self.arch

    @property
    def effective_model(self) -> ModelConfig:
        return replace(self.model, arch=self.effective_arch)

    @property
    def effective_loss(self) -> LossWeights:
        loss = self.loss
        if self.ablation.no_clip_align:
            loss = replace(loss, lambda1=0.0)
        if self.ablation.no_supervision:
            loss = replace(loss, lambda2=0.0)
        return loss

    @property
    def pretrain_enabled(self) -> bool:
        return self.pretrain.enabled and not self.ablation.no_supervision

    @property
    def n_updates(self) -> int:
        per = self.n_envs * self.n_steps
        return -(-self.total_env_steps // per)


def _check_value(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(value, inner[0], path)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint!r}")


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown field")
    kwargs = {k: _check_value(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        msg = str(e)
        raise ConfigError(msg if msg.startswith(("config.", path)) else f"{path}: {msg}") from None


def config_from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    return _build(TrainConfig, data, "config")


def config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON ({e})") from None
    return config_from_dict(data)


def dump_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")
