"""Run configuration: one JSON file fully describes a synth/train run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from textrich.errors import ConfigError
from textrich.model import PRESETS, ModelConfig
from textrich.synth.generators import GENERATORS, GeneratorConfig
from textrich.training import MixtureSpec, StageConfig, default_stage


@dataclass
class RunConfig:
    model: object = "desk"  # preset name or explicit ModelConfig dict
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"spotting": 32})
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    stages: dict = field(default_factory=dict)  # "1"/"2"/"3" -> StageConfig overrides
    mixture: MixtureSpec | None = None
    desk_factor: float = 0.1
    finetune_every: int = 4

    def model_config(self) -> ModelConfig:
        if isinstance(self.model, str):
            if self.model not in PRESETS:
                raise ConfigError(f"unknown model preset {self.model!r}; expected one of {sorted(PRESETS)}")
            cfg = PRESETS[self.model](bins=self.generator.bins)
        else:
            try:
                cfg = ModelConfig.from_dict(self.model)
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad model config: {exc}") from None
        cfg.validate()
        return cfg

    def stage(self, k: int) -> StageConfig:
        overrides = dict(self.stages.get(str(k), {}))
        overrides.setdefault("seed", self.seed + k)
        return default_stage(k, desk_factor=self.desk_factor, **overrides)

    def dataset_counts(self) -> dict:
        if self.mixture is not None and "total" in self.counts:
            counts = self.mixture.counts(int(self.counts["total"]))
            n_text = round(self.counts["total"] * self.mixture.pure_text_ratio)
            return {**counts, **({"pure_text": n_text} if n_text else {})}
        return dict(self.counts)

    def validate(self) -> None:
        self.generator.validate()
        if self.mixture is not None:
            self.mixture.validate()
        counts = self.dataset_counts()
        unknown = set(counts) - set(GENERATORS)
        if unknown:
            raise ConfigError(f"unknown task(s) {sorted(unknown)}; expected one of {sorted(GENERATORS)}")
        if any(int(n) < 0 for n in counts.values()):
            raise ConfigError("sample counts must be nonnegative")
        if set(self.stages) - {"1", "2", "3"}:
            raise ConfigError(f"stage keys must be '1', '2' or '3', got {sorted(self.stages)}")
        for k in self.stages:
            self.stage(int(k))
        if self.desk_factor <= 0 or self.finetune_every < 1:
            raise ConfigError("desk_factor must be positive and finetune_every >= 1")
        self.model_config()

    def to_dict(self) -> dict:
        return {"model": self.model if isinstance(self.model, str) else dict(self.model), "seed": self.seed,
                "counts": self.counts, "generator": self.generator.to_dict(), "stages": self.stages,
                "mixture": None if self.mixture is None else {"weights": self.mixture.weights,
                                                              "pure_text_ratio": self.mixture.pure_text_ratio},
                "desk_factor": self.desk_factor, "finetune_every": self.finetune_every}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "seed", "counts", "generator", "stages", "mixture", "desk_factor", "finetune_every"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "generator" in d:
            d["generator"] = GeneratorConfig.from_dict(d["generator"])
        if d.get("mixture") is not None:
            d["mixture"] = MixtureSpec(**d["mixture"])
        d["stages"] = {str(k): v for k, v in d.get("stages", {}).items()}
        cfg = cls(**d)
        cfg.validate()
        return cfg


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data)
