"""Training configuration, loadable from TOML.

Every field of TrainConfig is addressable in the file; sections map to
the nested component configs. Omitted keys fall back to desk-scale
defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .backbone import BackboneConfig
from .bev_encoder import BEVEncoderConfig
from .core import BEVGridSpec
from .decoder import DecoderConfig
from .evaluator import EvalConfig
from .losses import LossWeights


def default_grid() -> BEVGridSpec:
    return BEVGridSpec(60, 30, (-30.0, 30.0), (-15.0, 15.0), 1.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-4
    steps: int = 100
    batch_size: int = 1
    seed: int = 0
    arss_enabled: bool = True
    eval_every: int = 0  # 0 means evaluate at the end only
    holdout_fraction: float = 0.25
    score_threshold: float = 0.4
    grid: BEVGridSpec = field(default_factory=default_grid)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bev: BEVEncoderConfig = field(default_factory=BEVEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every must be non-negative")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "arss_enabled": self.arss_enabled,
            "eval_every": self.eval_every,
            "holdout_fraction": self.holdout_fraction,
            "score_threshold": self.score_threshold,
            "grid": self.grid.to_dict(),
            "backbone": self.backbone.to_dict(),
            "bev": self.bev.to_dict(),
            "decoder": self.decoder.to_dict(),
            "weights": self.weights.to_dict(),
            "eval": self.eval.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        parsers = {
            "grid": BEVGridSpec.from_dict,
            "backbone": BackboneConfig.from_dict,
            "bev": BEVEncoderConfig.from_dict,
            "decoder": DecoderConfig.from_dict,
            "weights": LossWeights.from_dict,
            "eval": EvalConfig.from_dict,
        }
        for key, parse in parsers.items():
            if key in kw:
                kw[key] = parse(kw[key])
        unknown = set(kw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        with open(Path(path), "rb") as f:
            data = tomllib.load(f)
        return cls.from_dict(data)
