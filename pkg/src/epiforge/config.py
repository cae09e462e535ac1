"""Run configuration: JSON file with sections {data, model, losses, train, eval}."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

__all__ = ["DataConfig", "ModelConfig", "LossWeights", "TrainPlan", "EvalConfig", "Config"]


@dataclass
class DataConfig:
    csv: str = ""
    mode: str = "covid"  # covid | flu
    regions: list = field(default_factory=list)  # empty = all in file
    populations: dict = field(default_factory=dict)  # region -> N (required)
    outpatient_ratio: float = 0.05  # flu only; no principled default exists
    date_column: str = "date"
    region_column: str = "region"
    target_column: str = "target"
    feature_columns: list = field(default_factory=list)  # empty = all others


@dataclass
class ModelConfig:
    fourier_dim: int = 20  # maps to 2*d = 40 trunk inputs
    fourier_sigma: float = 1.0
    trunk_widths: tuple = (40, 40, 40, 20)  # last entry is the embedding size
    head_widths: tuple = (40, 40)  # hidden layers between embedding and states
    encoder_hidden: int = 32
    encoder_layers: int = 2
    decoder_hidden: int = 32
    sirs_beta_max: float = 2.0
    sirs_d_range: tuple = (1.0, 14.0)
    sirs_l_range: tuple = (180.0, 3650.0)

    @property
    def embed_dim(self) -> int:
        return self.trunk_widths[-1]


@dataclass
class LossWeights:
    w_ode: float = 10.0  # time-module and feature-module ODE residuals
    w_mono: float = 10.0
    w_param: float = 0.001
    w_helper: float = 0.1
    w_data_t: float = 1.0
    w_data_f: float = 1.0
    w_emb: float = 1.0
    w_output: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class TrainPlan:
    phase1_epochs: int = 1500
    phase2_epochs: int = 1500
    emb_threshold: float = 1e-2
    lr: float = 1e-3
    seed: int = 0
    extend_phase1: bool = True  # one retry before aborting on an unmet gate
    grad_matching: bool = True  # False = ablation: embedding + feature-ODE losses off
    baseline_epochs: int = 300

    def __post_init__(self):
        if self.emb_threshold <= 0:
            raise ValueError("emb_threshold must be positive")
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise ValueError("phase epochs must be >= 1")


@dataclass
class EvalConfig:
    horizon: int = 8
    short_horizons: tuple = (1, 2, 3, 4)
    long_horizons: tuple = (5, 6, 7, 8)
    weeks: list = field(default_factory=list)  # prediction week indices
    models: list = field(default_factory=lambda: ["einn"])


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    train: TrainPlan = field(default_factory=TrainPlan)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "Config":
        def build(klass, section):
            fields = {f for f in klass.__dataclass_fields__}
            unknown = set(section) - fields
            if unknown:
                raise KeyError(f"unknown config keys {sorted(unknown)} for {klass.__name__}")
            kwargs = {
                k: tuple(v) if isinstance(klass.__dataclass_fields__[k].default, tuple) else v
                for k, v in section.items()
            }
            return klass(**kwargs)

        return cls(
            data=build(DataConfig, raw.get("data", {})),
            model=build(ModelConfig, raw.get("model", {})),
            losses=build(LossWeights, raw.get("losses", {})),
            train=build(TrainPlan, raw.get("train", {})),
            eval=build(EvalConfig, raw.get("eval", {})),
        )

    @classmethod
    def from_json(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)
