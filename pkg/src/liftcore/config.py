"""Schema-versioned pipeline configuration; unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, create_model

from liftcore.field import FieldConfig
from liftcore.train import TrainConfig

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _mirror(dc, name: str, overrides: dict | None = None):
    """Strict pydantic model with the fields and defaults of a dataclass."""
    fields = {}
    for f in dataclasses.fields(dc):
        if f.name in (overrides or {}):
            fields[f.name] = overrides[f.name]
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        ann = type(default)
        if isinstance(default, tuple):
            ann, default = list, list(default)
        fields[f.name] = (ann, default)
    return create_model(name, __base__=_Strict, **fields)


FieldSection = _mirror(FieldConfig, "FieldSection")
TrainSection = _mirror(TrainConfig, "TrainSection", {"field_config": (FieldSection, FieldSection())})


class PlanSection(_Strict):
    l: int = Field(16, ge=2)
    D: Literal[2, 4] = 4
    step: float = Field(0.1, gt=0)
    rot_step: float = 0.0


class MatchingSection(_Strict):
    extra_edges: int = Field(0, ge=0)
    refine_iters: int = Field(400, ge=0)


class PathsSection(_Strict):
    dataset: str | None = None
    output: str | None = None


class PipelineConfig(_Strict):
    schema_version: Literal[1]
    plan: PlanSection = PlanSection()
    matching: MatchingSection = MatchingSection()
    train: TrainSection = TrainSection()  # type: ignore[valid-type]
    paths: PathsSection = PathsSection()

    def train_config(self, **overrides) -> TrainConfig:
        d = self.train.model_dump()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(d)


def load_config(path) -> PipelineConfig:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or "schema_version" not in raw:
        raise ValueError(f"{path}: config must be an object with a schema_version")
    return PipelineConfig.model_validate(raw)


def default_config() -> PipelineConfig:
    return PipelineConfig(schema_version=SCHEMA_VERSION)
