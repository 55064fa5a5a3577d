"""Pipeline configuration: nested dataclasses with YAML round-trip and validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .genmodel import RescaleConfig
from .pose import HypothesisConfig, IcpConfig, ScoreWeights, Thresholds
from .volume import DEFAULT_PADDING, DEFAULT_RESOLUTION, DEFAULT_TRUNCATION, RaycastConfig


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class VolumeConfig:
    resolution: int = DEFAULT_RESOLUTION
    truncation: float = DEFAULT_TRUNCATION
    padding: float = DEFAULT_PADDING


@dataclass(frozen=True)
class SamplingConfig:
    strategy: str = "uncertainty"  # or "geodesic"
    area_weighted: bool = False


@dataclass(frozen=True)
class AugmentationConfig:
    n_views: int = 24
    distance_factor: float = 2.5
    max_overlap: float = 0.3


@dataclass(frozen=True)
class PipelineConfig:
    hypothesis: HypothesisConfig = field(default_factory=HypothesisConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    sampling_k: int = 10
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    pool_capacity: int = 30
    score_weights: ScoreWeights = field(default_factory=ScoreWeights)
    icp: IcpConfig = field(default_factory=IcpConfig)
    raycast: RaycastConfig = field(default_factory=RaycastConfig)
    rescale: RescaleConfig = field(default_factory=RescaleConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rescale"]["scale_factors"] = [float(s) for s in self.rescale.scale_factors]
        return d

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def replace(self, **changes) -> "PipelineConfig":
        d = self.to_dict()
        for key, value in changes.items():
            section, _, name = key.partition(".")
            if name:
                d[section][name] = value
            else:
                d[key] = value
        return PipelineConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        d = dict(d or {})
        problems: list[str] = []
        unknown = set(d) - {f.name for f in fields(cls)}
        problems += [f"unknown key {k!r}" for k in sorted(unknown)]
        sections = {
            "hypothesis": HypothesisConfig,
            "thresholds": Thresholds,
            "volume": VolumeConfig,
            "sampling": SamplingConfig,
            "score_weights": ScoreWeights,
            "icp": IcpConfig,
            "raycast": RaycastConfig,
            "rescale": RescaleConfig,
            "augmentation": AugmentationConfig,
        }
        kwargs = {}
        for name, typ in sections.items():
            sub = d.get(name, {}) or {}
            if not isinstance(sub, dict):
                problems.append(f"{name} must be a mapping")
                continue
            allowed = {f.name for f in fields(typ)}
            bad = set(sub) - allowed
            problems += [f"unknown key {name}.{k}" for k in sorted(bad)]
            sub = {k: v for k, v in sub.items() if k in allowed}
            if name == "rescale" and "scale_factors" in sub:
                sub["scale_factors"] = tuple(float(s) for s in sub["scale_factors"])
            try:
                kwargs[name] = typ(**sub)
            except (TypeError, ValueError) as exc:
                problems.append(f"{name}: {exc}")
        for name in ("sampling_k", "pool_capacity", "seed"):
            if name in d:
                if not isinstance(d[name], int) or isinstance(d[name], bool):
                    problems.append(f"{name} must be an integer")
                else:
                    kwargs[name] = d[name]
        if problems:
            raise ConfigError(problems)
        cfg = cls(**kwargs)
        problems = cfg.violations()
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError([f"{path} must contain a mapping"])
        return cls.from_dict(data)

    def violations(self) -> list[str]:
        out = []
        v = self.volume
        if v.resolution < 8:
            out.append("volume.resolution must be at least 8")
        if v.truncation <= 0 or v.padding < 0:
            out.append("volume.truncation must be positive and volume.padding non-negative")
        if self.sampling_k < 2:
            out.append("sampling_k must be at least 2")
        if self.pool_capacity < 1:
            out.append("pool_capacity must be positive")
        if self.sampling.strategy not in ("uncertainty", "geodesic"):
            out.append(f"sampling.strategy must be 'uncertainty' or 'geodesic', got {self.sampling.strategy!r}")
        if self.icp.huber_delta <= 0 or self.icp.max_corr_dist <= 0:
            out.append("icp.huber_delta and icp.max_corr_dist must be positive")
        if self.icp.min_corr < 1:
            out.append("icp.min_corr must be positive")
        a = self.augmentation
        if a.n_views < 0 or a.distance_factor <= 0 or not 0.0 <= a.max_overlap <= 1.0:
            out.append("augmentation settings out of range")
        if not np.isfinite([self.score_weights.w_g, self.score_weights.w_p]).all():
            out.append("score weights must be finite")
        return out
