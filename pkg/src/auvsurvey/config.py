"""Pipeline configuration: YAML file plus command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .cluster import RESTARTS
from .detect import DEFAULT_CONFIDENCE, DEFAULT_PAD
from .reduce import SelectionRule
from .report import LLMConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    repository_root: str = "repository"
    detections: str | None = None
    images: str | None = None
    vectors: str | None = None
    class_names: list[str] = field(default_factory=lambda: ["fish"])
    confidence_threshold: float = DEFAULT_CONFIDENCE
    pad_fraction: float = DEFAULT_PAD
    pca_rule: str = "0.98"
    k: int | None = None
    k_min: int | None = None
    k_max: int | None = None
    restarts: int = RESTARTS
    seed: int = 0
    region_name: str = "arabian-gulf"
    gazetteer: str | None = None
    track_points: int | None = None
    cluster_summary: bool = False
    workers: int = 1
    llm: LLMConfig = field(default_factory=LLMConfig)

    def validate(self) -> None:
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError(f"confidence_threshold must be in [0, 1], got {self.confidence_threshold}")
        if self.pad_fraction < 0:
            raise ConfigError(f"pad_fraction must be >= 0, got {self.pad_fraction}")
        try:
            self.selection_rule()
        except ValueError as exc:
            raise ConfigError(f"pca_rule: {exc}") from None
        if self.k is not None and self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.track_points is not None and self.track_points < 1:
            raise ConfigError("track_points must be >= 1")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")

    def selection_rule(self) -> SelectionRule:
        return SelectionRule.parse(self.pca_rule)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest_material(self) -> dict:
        """Settings that influence artifacts (paths to the repository excluded)."""
        d = self.to_dict()
        d.pop("repository_root")
        d.pop("workers")
        d["llm"] = {"model_tag": self.llm.model_tag, "base_url": self.llm.base_url}
        return d


_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}
_LLM_FIELDS = {f.name for f in dataclasses.fields(LLMConfig)}


def config_from_mapping(data: Mapping[str, Any], base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = dataclasses.replace(base) if base else PipelineConfig()
    cfg.llm = dataclasses.replace(cfg.llm)
    for key, value in data.items():
        if key == "llm":
            if not isinstance(value, Mapping):
                raise ConfigError("llm must be a mapping")
            for lk, lv in value.items():
                if lk not in _LLM_FIELDS:
                    raise ConfigError(f"unknown llm setting {lk!r}")
                setattr(cfg.llm, lk, lv)
        elif key in _FIELDS:
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if isinstance(cfg.pca_rule, (int, float)):
        cfg.pca_rule = str(cfg.pca_rule)
    return cfg


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read the YAML config (if any) and apply overrides; overrides win."""
    data: dict = {}
    if path:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a key-value document")
        data = loaded or {}
    cfg = config_from_mapping(data)
    if overrides:
        cfg = config_from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    cfg.validate()
    return cfg
