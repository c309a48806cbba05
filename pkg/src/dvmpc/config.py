"""Run configuration: a YAML document validated into nested sections.

Unknown keys are rejected and every validation message names the offending
path (for example ``mpc.horizon``).  ``DVMPC_SEED`` and ``DVMPC_OUT`` override
the seed and output directory.
"""
from __future__ import annotations

import os
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .critic import CriticConfig
from .envs import ENVIRONMENTS
from .mpc import MpcConfig


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvSection(_Section):
    name: str = "point_mass_2d_walls"
    params: dict = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {v!r}; choose from {sorted(ENVIRONMENTS)}")
        return v


class MpcSection(_Section):
    horizon: float = Field(1.0, gt=0)
    dt: float = Field(0.1, gt=0)
    max_iterations: int = Field(5, ge=1)
    tolerance: float = Field(1e-6, gt=0)
    reg_init: float = Field(1e-6, gt=0)
    reg_growth: float = Field(10.0, gt=1)
    reg_shrink: float = Field(0.5, gt=0, lt=1)
    line_search_factor: float = Field(0.5, gt=0, lt=1)
    min_step: float = Field(2.0**-10, gt=0, le=1)
    cost_mode: Literal["heuristic_only", "heuristic_plus_running"] = "heuristic_plus_running"
    exact_terminal: bool = False

    @model_validator(mode="after")
    def _divides(self):
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * steps or self.dt > self.horizon:
            raise ValueError("dt must divide the horizon")
        return self

    def build(self, **overrides):
        data = self.model_dump()
        data.update(overrides)
        return MpcConfig(**data)


class CriticSection(_Section):
    minibatches: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    step_size: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    polyak_tau: float = Field(0.05, gt=0, le=1)
    discount_mode: Literal["per_second", "per_step_raw"] = "per_second"
    buffer_capacity: int = Field(20000, ge=1)

    def build(self, env):
        return CriticConfig(minibatches=self.minibatches, batch_size=self.batch_size, step_size=self.step_size,
                            weight_decay=self.weight_decay, polyak_tau=self.polyak_tau, discount=env.discount,
                            dt=env.dt, discount_mode=self.discount_mode)


class NetworkSection(_Section):
    hidden: list[int] = Field(default_factory=lambda: [12, 12, 12])
    output_gain: float = Field(0.01, ge=0)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be positive")
        return v


class TrainingSection(_Section):
    iterations: int = Field(100, ge=0)
    episodes_per_iteration: int = Field(4, ge=1)
    updates_per_iteration: int = Field(4, ge=0)
    eval_every: int = Field(1, ge=1)
    checkpoint_every: int = Field(25, ge=1)
    n_eval: int = Field(8, ge=1)
    success_threshold: float = Field(0.9, ge=0, le=1)
    actor_network: Literal["target", "online"] = "target"
    start_times: Literal["zero", "uniform"] = "zero"
    save_eval_trajectories: bool = False


class AblationSection(_Section):
    cost_modes: list[Literal["heuristic_only", "heuristic_plus_running"]] = Field(
        default_factory=lambda: ["heuristic_only", "heuristic_plus_running"])
    horizons: list[float] = Field(default_factory=lambda: [1.0])
    seeds: list[int] = Field(default_factory=lambda: [0])


class RunConfig(_Section):
    env: EnvSection = Field(default_factory=EnvSection)
    mpc: MpcSection = Field(default_factory=MpcSection)
    critic: CriticSection = Field(default_factory=CriticSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    seed: int = 0
    output_dir: str = "runs"
    name: Optional[str] = None

    def to_yaml(self):
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def with_updates(self, **sections):
        """Copy with nested overrides, e.g. ``with_updates(mpc={"horizon": 0.5}, seed=3)``."""
        data = self.model_dump()
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return validate_config(data)


def _format_errors(exc):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def validate_config(data):
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def apply_environment(cfg, environ=None):
    environ = os.environ if environ is None else environ
    updates = {}
    if environ.get("DVMPC_SEED"):
        try:
            updates["seed"] = int(environ["DVMPC_SEED"])
        except ValueError:
            raise ConfigError(f"DVMPC_SEED: not an integer: {environ['DVMPC_SEED']!r}") from None
    if environ.get("DVMPC_OUT"):
        updates["output_dir"] = environ["DVMPC_OUT"]
    return cfg.with_updates(**updates) if updates else cfg


def load_config(path, environ=None):
    """Read, validate and apply environment overrides."""
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return apply_environment(validate_config(data), environ)
