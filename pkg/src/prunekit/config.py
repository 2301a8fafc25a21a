"""Experiment configuration (JSON) with field-path error reporting."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from prunekit.damage import METHODS
from prunekit.prune import NEURON_METHODS


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Strict):
    n_train: int = Field(50_000, ge=1)
    n_test: int = Field(10_000, ge=1)
    feature_dim: int = Field(64, ge=1)
    pos_balance_train: float = Field(0.753, gt=0, lt=1)
    pos_balance_test: float = Field(0.799, gt=0, lt=1)
    difficulty: float = Field(3.0, ge=0)
    clusters_per_class: int = Field(8, ge=1)
    seed: int = 0


class CsvSection(_Strict):
    train: str
    test: str
    label_column: str = "label"

    @model_validator(mode="after")
    def _distinct(self):
        if Path(self.train).resolve() == Path(self.test).resolve():
            raise ValueError("train and test must be distinct files")
        return self


class DatasetSection(_Strict):
    synth: Optional[SynthSection] = None
    csv: Optional[CsvSection] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.synth is None) == (self.csv is None):
            raise ValueError("give exactly one of 'synth' or 'csv'")
        return self


class ModelSection(_Strict):
    scale: float = Field(0.125, gt=0, le=1)
    activation: Literal["elu", "relu", "identity"] = "elu"
    batchnorm: bool = True
    dropout: float = Field(0.1, ge=0, lt=1)
    widths: Optional[list[int]] = None

    @field_validator("widths")
    @classmethod
    def _positive(cls, v):
        if v is not None and (not v or min(v) < 1):
            raise ValueError("widths must be a non-empty list of positive integers")
        return v


class TrainSection(_Strict):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.05, gt=0)


class RunSection(_Strict):
    name: str
    level: Literal["parameter", "neuron"] = "parameter"
    method: str
    fraction: float = Field(0.10, gt=0, lt=1)
    rounds: int = Field(10, ge=0)
    finetune_epochs: int = Field(1, ge=0)
    finetune_samples: Optional[int] = Field(7_500, ge=1)
    scope: Literal["per-layer", "global"] = "per-layer"
    layer_floor: int = Field(1, ge=1)
    damage_samples: int = Field(1024, ge=2)
    learning_rate: Optional[float] = Field(None, gt=0)
    include_bias: bool = True
    include_outgoing: bool = False
    recompute_damage: bool = True
    merge_outgoing: Literal["sum", "drop"] = "sum"
    seeds: Optional[list[int]] = None

    @model_validator(mode="after")
    def _method(self):
        allowed = METHODS if self.level == "parameter" else NEURON_METHODS
        if self.method not in allowed:
            raise ValueError(f"method {self.method!r} is not implemented at {self.level} level "
                             f"(choose from {', '.join(allowed)})")
        return self


class ScratchSection(_Strict):
    name: str
    mode: Literal["fixed-neuron-fraction", "fixed-connection-fraction", "from-neuron-report"]
    amounts: list[float] = Field(default_factory=list)
    zip_targets: list[float] = Field(default_factory=list)  # zipped-size fractions of the base model
    report_method: str = "obd_sd"
    epochs: Optional[int] = Field(None, ge=0)
    seeds: Optional[list[int]] = None

    @field_validator("amounts")
    @classmethod
    def _amounts(cls, v):
        if any(not 0 <= a < 1 for a in v):
            raise ValueError("amounts must lie in [0, 1)")
        return v

    @field_validator("zip_targets")
    @classmethod
    def _targets(cls, v):
        if any(not 0 < t < 1 for t in v):
            raise ValueError("zip_targets must lie in (0, 1)")
        return v


class ExperimentConfig(_Strict):
    output_dir: str = "results"
    dataset: DatasetSection = Field(default_factory=lambda: DatasetSection(synth=SynthSection()))
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    damage_samples: int = Field(4096, ge=2)
    runs: list[RunSection] = Field(default_factory=list)
    scratch: list[ScratchSection] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_names(self):
        for kind, items in (("run", self.runs), ("scratch", self.scratch)):
            names = [i.name for i in items]
            dup = {n for n in names if names.count(n) > 1}
            if dup:
                raise ValueError(f"duplicate {kind} names: {sorted(dup)}")
        return self


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: Union[dict, str]) -> ExperimentConfig:
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
