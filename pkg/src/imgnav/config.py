"""Flat key-value run configuration, read from YAML."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .geometry import MotionConfig
from .gridworld import SensorConfig, WorldGenConfig


@dataclass(frozen=True)
class Config:
    # world
    world_width_m: float = 8.0
    world_height_m: float = 8.0
    cell_size_m: float = 0.10
    train_world_start: int = 0
    n_train_worlds: int = 72
    eval_world_start: int = 100_000
    n_eval_worlds: int = 14

    # agent
    step_m: float = 0.25
    turn_rad: float = math.pi / 2
    agent_radius_m: float = 0.0
    n_rays: int = 36
    max_range_m: float = 5.0
    scan_rays: int = 360
    max_episode_steps: int = 500

    # goal policy
    grid_size: int = 32
    hidden: int = 64
    init_logvar: float = -2.0
    n_envs: int = 8
    n_updates: int = 600
    horizon_scales: int = 10
    k_steps: int = 10
    scales_per_episode: int = 50
    lr: float = 3e-4
    adam_eps: float = 1e-6
    tau: float = 0.5
    gae_lambda: float = 0.95
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    ppo_epochs: int = 4
    n_minibatches: int = 4
    max_grad_norm: float = 0.5
    reward_scale: float = 0.1

    # reward
    r_goal: float = 20.0
    r_collide: float = -5.0
    goal_radius_m: float = 1.0
    explore_coef: float = 1.0
    sparse_reward: bool = False

    # ending classifier
    nepm_episodes: int = 24
    nepm_pairs: int = 20_000
    nepm_iters: int = 3000
    nepm_lr: float = 1e-3
    nepm_eps: float = 1e-5
    nepm_batch: int = 128
    nepm_holdout: float = 0.2
    stop_threshold: float = 0.5

    # evaluation
    tasks_per_tier: int = 200
    eval_agent: str = "ours"
    eval_sampling: bool = False
    workers: int = 1
    n_svgs: int = 6

    def __post_init__(self):
        if self.horizon_scales <= 0 or self.k_steps <= 0 or self.scales_per_episode <= 0:
            raise ConfigurationError("horizon_scales, k_steps and scales_per_episode must be positive")
        if self.nepm_batch % 2:
            raise ConfigurationError("nepm_batch must be even for class balance")
        if self.eval_agent not in ("ours", "random_goal", "random_agent"):
            raise ConfigurationError(f"unknown eval_agent {self.eval_agent!r}")
        train = set(self.train_world_seeds())
        if train & set(self.eval_world_seeds()):
            raise ConfigurationError("train and eval world seeds overlap")

    @property
    def motion(self) -> MotionConfig:
        return MotionConfig(self.step_m, self.turn_rad, self.agent_radius_m)

    @property
    def sensor(self) -> SensorConfig:
        return SensorConfig(self.n_rays, self.max_range_m, self.scan_rays)

    @property
    def worldgen(self) -> WorldGenConfig:
        return WorldGenConfig(self.world_width_m, self.world_height_m, self.cell_size_m)

    def train_world_seeds(self) -> range:
        return range(self.train_world_start, self.train_world_start + self.n_train_worlds)

    def eval_world_seeds(self) -> range:
        return range(self.eval_world_start, self.eval_world_start + self.n_eval_worlds)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path=None, **overrides) -> Config:
    values: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must be a key: value mapping")
        values.update(raw)
    values.update(overrides)
    known = {f.name: f for f in dataclasses.fields(Config)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {}
    for key, value in values.items():
        default = known[key].default
        try:
            coerced[key] = type(default)(value) if not isinstance(default, bool) else _as_bool(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
    return Config(**coerced)


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)


def dump_config(config: Config, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
