"""Experiment configuration: YAML files validated by pydantic models."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from artisim.harness.generator import CATEGORIES
from artisim.perception import FLOW_MODES

EXPERIMENT_KINDS = ("robustness", "ip-performance", "manipulation", "closed-loop", "disturbance", "residual")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerOverrides(_Strict):
    steps: int | None = Field(None, ge=1)
    method: Literal["adam", "momentum"] | None = None
    lr: float | None = Field(None, gt=0)
    scale_mask: float | None = Field(None, ge=0)


class ExperimentConfig(_Strict):
    kind: Literal["robustness", "ip-performance", "manipulation", "closed-loop", "disturbance", "residual"]
    seed: int = 0
    categories: list[str] = Field(default_factory=lambda: list(CATEGORIES))
    n_scenes: int = Field(30, ge=1)
    n_points: int = Field(600, ge=16)
    flip_rate: float = Field(0.05, ge=0, lt=0.5)
    flow_modes: list[str] = Field(default_factory=lambda: ["gt", "gt+noise", "nearest-neighbor"])
    noise_sigma: float = Field(0.05, ge=0)
    init_rot_deg: tuple[float, float] = (10.0, 20.0)
    init_tran_cm: tuple[float, float] = (10.0, 20.0)
    probe_delta: float = Field(0.6, gt=0)
    ip_steps: int = Field(5, ge=0)
    ip_policy: Literal["round-robin", "epsilon-greedy-bandit", "random"] = "epsilon-greedy-bandit"
    optimizer: OptimizerOverrides = Field(default_factory=OptimizerOverrides)
    goal_deg: float = Field(60.0, gt=0)
    goal_m: float = Field(0.15, gt=0)
    horizon: int = Field(100, ge=1)
    robot_iters: int = Field(20, ge=0)
    perturbation_seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    scenes_per_seed: int = Field(4, ge=1)
    trust: float = Field(1.0, ge=0)
    residual_epochs: int = Field(200, ge=1)
    transitions: int = Field(1000, ge=8)
    heldout: int = Field(300, ge=1)
    action_noise: float = Field(0.3, ge=0)
    disturbances_m: list[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15, 0.2])
    out: str = "results"

    @field_validator("categories")
    @classmethod
    def _known_categories(cls, v):
        bad = [c for c in v if c not in CATEGORIES]
        if bad or not v:
            raise ValueError(f"unknown categories {bad}" if bad else "no categories")
        return v

    @field_validator("flow_modes")
    @classmethod
    def _known_modes(cls, v):
        bad = [m for m in v if m not in FLOW_MODES]
        if bad or not v:
            raise ValueError(f"unknown flow modes {bad}" if bad else "no flow modes")
        return v

    @field_validator("disturbances_m")
    @classmethod
    def _sorted(cls, v):
        if any(x < 0 for x in v) or list(v) != sorted(v):
            raise ValueError("disturbances must be non-negative and ascending")
        return v

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("init_rot_deg", "init_tran_cm"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
        return self


def load_config(path: str | Path | None = None, default_kind: str | None = None, **overrides) -> ExperimentConfig:
    """Read a YAML config (optional) and apply keyword overrides; raises ConfigError."""
    data = {"kind": default_kind} if default_kind else {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        data.update(loaded or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")
