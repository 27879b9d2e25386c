"""Run configuration: one flat record with a default for every field, loaded from YAML."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .core import HORIZON


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    n_train: int = 200
    n_eval: int = 50
    workers: int = 1

    # vocabulary
    vocab_k: int = 256
    library_size: int = 8192
    x_thresh: float = 10.0
    y_thresh: float = 5.0
    theta_thresh_deg: float = 20.0

    # world model
    latent_dim: int = 32
    wm_hidden: int = 128
    k_max: int = 16
    steps: int = 1
    wm_train_steps: int = 6000
    wm_batch: int = 256
    wm_lr: float = 1e-3
    wm_traj_per_scene: int = 32

    # reward model
    rm_token_dim: int = 8
    rm_width: int = 32
    rm_train_steps: int = 4000
    rm_batch: int = 256
    rm_lr: float = 2e-3
    rm_label_fraction: float = 1.0
    rm_dim_weights: tuple = (1.0,) * 8
    rm_horizon_weights: tuple = (1.0,) * HORIZON

    # policy / RL
    policy_hidden: int = 128
    policy_degree: int = 3
    bc_epochs: int = 1000
    bc_lr: float = 1e-3
    rl_train_steps: int = 300
    rl_batch: int = 16
    rl_lr: float = 3e-4
    g1: int = 8
    g2: int = 8
    temperature: float = 30.0
    epsilon: float = 0.2
    lambda_bc: float = 0.0
    lambda_kl: float = 0.01
    sigma_xy_base: float = 0.2
    sigma_xy_slope: float = 0.05
    sigma_theta_base: float = 0.05
    sigma_theta_slope: float = 0.01
    w_safe: tuple = (1.0, 1.0, 1.0, 1.0)
    w_task: tuple = (0.85, 0.05, 0.05, 0.05)
    w_time: tuple = (1.0 / HORIZON,) * HORIZON
    fusion: str = "log_product"
    sampler: str = "vocab"

    # eval
    latency_frames: int = 256
    latency_repeats: int = 3

    def __post_init__(self):
        if self.steps not in (1, 2, 4, 8, 16) or self.steps > self.k_max:
            raise ConfigError(f"steps must be a power of two <= k_max, got {self.steps}")
        if self.sampler not in ("vocab", "random"):
            raise ConfigError(f"sampler must be 'vocab' or 'random', got {self.sampler!r}")
        if not 0 < self.rm_label_fraction <= 1:
            raise ConfigError("rm_label_fraction must lie in (0, 1]")
        if self.n_train < 1 or self.n_eval < 0:
            raise ConfigError("scene counts must be positive")
        for name, size in (("w_safe", 4), ("w_task", 4), ("w_time", HORIZON), ("rm_dim_weights", 8), ("rm_horizon_weights", HORIZON)):
            if len(getattr(self, name)) != size:
                raise ConfigError(f"{name} needs {size} values")

    @property
    def theta_thresh(self) -> float:
        return math.radians(self.theta_thresh_deg)

    def replace(self, **kw) -> "RunConfig":
        return from_dict({**to_dict(self), **kw})

    def rl_config(self):
        from .rl import RLConfig

        return RLConfig(
            g1=self.g1, g2=self.g2, temperature=self.temperature, epsilon=self.epsilon,
            lambda_bc=self.lambda_bc, lambda_kl=self.lambda_kl, lr=self.rl_lr, batch_scenes=self.rl_batch,
            wm_steps=self.steps, sigma_xy_base=self.sigma_xy_base, sigma_xy_slope=self.sigma_xy_slope,
            sigma_theta_base=self.sigma_theta_base, sigma_theta_slope=self.sigma_theta_slope,
            w_safe=tuple(self.w_safe), w_task=tuple(self.w_task), w_time=tuple(self.w_time),
            fusion=self.fusion, sampler=self.sampler,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def from_dict(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    clean = {}
    for k, v in values.items():
        if isinstance(_FIELDS[k].default, tuple):
            v = tuple(float(x) for x in v)
        clean[k] = v
    return RunConfig(**clean)


def to_dict(cfg: RunConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        values = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(values)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True))
