"""Run configuration. Every section rejects unknown keys."""

from __future__ import annotations

import json
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .groups import STRATEGIES, GroupSpec, MarginParams
from .losses import ClsWeights, Stage1Weights, Stage2Weights
from .model import ModelConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GroupConfig(_Section):
    strategy: str = "overlap-5"
    intervals: Optional[list[tuple[float, float]]] = None

    @field_validator("strategy")
    @classmethod
    def _known(cls, v):
        if v not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        return v


class MarginConfig(_Section):
    m_intra: float = Field(0.1, ge=0)
    m_base: float = Field(0.5, ge=0)
    m_step: float = Field(0.1, ge=0)


class Stage1Config(_Section):
    lambda1: float = Field(0.9, ge=0)
    lambda2: float = Field(0.005, ge=0)
    lambda3: float = Field(0.001, ge=0)
    gamma: float = Field(1.0, ge=0)
    eps: float = Field(1e-8, gt=0)
    fallback_uniform: bool = True
    epochs: int = Field(17, ge=0)
    head_lr: float = Field(2e-3, ge=0)
    encoder_lr: float = Field(1.6e-3, ge=0)
    weight_decay: float = Field(2e-2, ge=0)


class Stage2Config(_Section):
    beta1: float = Field(0.3, ge=0)
    beta2: float = Field(0.3, ge=0)
    beta3: float = Field(0.02, ge=0)
    epochs: int = Field(5, ge=0)
    head_lr: float = Field(1e-3, ge=0)
    encoder_top_lr: float = Field(4e-4, ge=0)
    encoder_base_lr: float = Field(2e-4, ge=0)
    weight_decay: float = Field(1e-2, ge=0)


class ClsConfig(_Section):
    theta1: float = Field(1.0, ge=0)
    theta2: float = Field(0.5, ge=0)
    theta3: float = Field(0.5, ge=0)
    theta4: float = Field(0.1, ge=0)
    m_sep: float = Field(1.0, ge=0)
    m_b: float = Field(0.5, ge=0)
    A_clip: float = Field(2.0, ge=0)


class OptimConfig(_Section):
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    grad_clip_norm: float = Field(1.0, gt=0)
    batch_pairs: int = Field(96, ge=1)
    grad_accum_steps: int = Field(8, ge=1)
    num_pairs: Optional[int] = Field(None, ge=1)

    @field_validator("betas")
    @classmethod
    def _betas(cls, v):
        if not all(0 <= b < 1 for b in v):
            raise ValueError("betas must lie in [0, 1)")
        return v


class TrainConfig(_Section):
    model: ModelConfig = ModelConfig()
    groups: GroupConfig = GroupConfig()
    margins: MarginConfig = MarginConfig()
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()
    cls: ClsConfig = ClsConfig()
    optim: OptimConfig = OptimConfig()
    seed: int = 42

    # derived objects ---------------------------------------------------------

    def group_spec(self) -> GroupSpec:
        return GroupSpec.build(self.groups.strategy, self.model.S, self.groups.intervals)

    def margin_params(self) -> MarginParams:
        return MarginParams(**self.margins.model_dump())

    def stage1_weights(self) -> Stage1Weights:
        s = self.stage1
        return Stage1Weights(s.lambda1, s.lambda2, s.lambda3, s.gamma, self.model.S, s.eps, s.fallback_uniform)

    def stage2_weights(self) -> Stage2Weights:
        s = self.stage2
        return Stage2Weights(s.beta1, s.beta2, s.beta3, self.model.S, self.stage1.eps, self.stage1.fallback_uniform)

    def cls_weights(self) -> ClsWeights:
        c = self.cls
        return ClsWeights(c.theta1, c.theta2, c.theta3, c.theta4, c.m_sep, c.m_b, c.A_clip, self.stage1.eps)


def _format_validation(exc: ValidationError) -> str:
    msgs = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            msgs.append(f"unknown config key {loc!r}")
        else:
            msgs.append(f"{loc}: {err['msg']}")
    return "; ".join(msgs)


def parse_config(doc: dict[str, Any]) -> TrainConfig:
    try:
        cfg = TrainConfig.model_validate(doc)
        cfg.group_spec()
        cfg.margin_params()
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(doc)


def apply_overrides(doc: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values parse as JSON when possible."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return doc
