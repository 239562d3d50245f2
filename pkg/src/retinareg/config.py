"""Pipeline configuration with strict JSON parsing (unknown keys rejected)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .matching import RansacConfig


@dataclass(frozen=True)
class MetricThresholds:
    """Pixel thresholds for the evaluation metrics."""

    sr_me: float = 3.0
    sr_mae: float = 5.0
    rep: float = 5.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PipelineConfig:
    n_max: int = 4000
    nms_radius: float = 4.0
    min_confidence: float = 0.0
    descriptor_dim: int = 128
    backend: str = "reference"
    seed: int = 0
    ransac: RansacConfig = field(default_factory=RansacConfig)
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)

    def __post_init__(self):
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.nms_radius < 1:
            raise ConfigError("nms_radius must be >= 1")
        if self.backend not in ("reference", "file"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.descriptor_dim < 2:
            raise ConfigError("descriptor_dim must be >= 2")

    def to_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "nms_radius": self.nms_radius,
            "min_confidence": self.min_confidence,
            "descriptor_dim": self.descriptor_dim,
            "backend": self.backend,
            "seed": self.seed,
            "ransac": {
                "reproj_threshold": self.ransac.reproj_threshold,
                "max_iterations": self.ransac.max_iterations,
                "confidence": self.ransac.confidence,
                "seed": self.ransac.seed,
            },
            "thresholds": self.thresholds.to_dict(),
        }


def _build(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under {path!r}")
    kwargs = {}
    for name, value in data.items():
        if name == "ransac":
            value = _build(RansacConfig, _expect_mapping(value, path + ".ransac"), path + ".ransac")
        elif name == "thresholds":
            value = _build(MetricThresholds, _expect_mapping(value, path + ".thresholds"), path + ".thresholds")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config under {path!r}: {exc}") from exc


def _expect_mapping(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"expected an object at {path!r}")
    return value


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, _expect_mapping(data, "config"), "config")


def load_pipeline_config(path) -> PipelineConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return pipeline_config_from_dict(data)
