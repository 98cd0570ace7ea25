"""Pipeline configuration: built-in defaults < JSON file < command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .model import TrainConfig
from .volume import AggregationWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyConfig:
    n: int = 32
    fine_n: int = 64
    face_res: int = 32
    mode: str = "face-grid"
    delta: float = 0.05
    margin: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class VolumeConfig:
    out_res: int = 64
    face_res: int | None = None  # None: same as out_res
    iso: float = 0.5
    weights: tuple = (1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0)


@dataclass(frozen=True)
class MetricsConfig:
    points: int = 10_000
    map_res: int = 256
    seed: int = 0
    normal_region: str = "union"


@dataclass(frozen=True)
class PipelineConfig:
    occupancy: OccupancyConfig = field(default_factory=OccupancyConfig)
    model: TrainConfig = field(default_factory=TrainConfig)
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return {
            "occupancy": asdict(self.occupancy),
            "model": self.model.to_dict(),
            "volume": {**asdict(self.volume), "weights": list(self.volume.weights)},
            "metrics": asdict(self.metrics),
        }

    def with_seed(self, seed: int) -> "PipelineConfig":
        return PipelineConfig(replace(self.occupancy, seed=seed), replace(self.model, seed=seed),
                              self.volume, replace(self.metrics, seed=seed))


SECTIONS = {"occupancy": OccupancyConfig, "volume": VolumeConfig, "metrics": MetricsConfig}


def validate(cfg: PipelineConfig) -> None:
    o, v, m = cfg.occupancy, cfg.volume, cfg.metrics
    counts = {"occupancy.n": o.n, "occupancy.fine_n": o.fine_n, "occupancy.face_res": o.face_res,
              "volume.out_res": v.out_res, "metrics.points": m.points, "metrics.map_res": m.map_res}
    if v.face_res is not None:
        counts["volume.face_res"] = v.face_res
    for name, val in counts.items():
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise ConfigError(f"{name} must be an integer >= 1, got {val!r}")
    if o.mode not in ("face-grid", "uniform-random"):
        raise ConfigError(f"occupancy.mode must be face-grid or uniform-random, got {o.mode!r}")
    if not o.delta > 0:
        raise ConfigError("occupancy.delta must be positive")
    if not 0.0 <= o.margin < 0.5:
        raise ConfigError("occupancy.margin must lie in [0, 0.5)")
    if not 0.0 < v.iso < 1.0:
        raise ConfigError("volume.iso must lie in (0, 1)")
    if m.normal_region not in ("union", "intersection", "full"):
        raise ConfigError(f"metrics.normal_region must be union, intersection or full, got {m.normal_region!r}")
    if len(v.weights) != 3:
        raise ConfigError("volume.weights needs three values")
    try:
        AggregationWeights(*v.weights)
    except ValueError as exc:
        raise ConfigError(f"volume.weights: {exc}") from exc


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(extra))}")
    if "weights" in data:
        data = {**data, "weights": tuple(data["weights"])}
    return cls(**data)


def from_dict(d: dict) -> PipelineConfig:
    extra = set(d) - set(SECTIONS) - {"model", "seed"}
    if extra:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(extra))}")
    base = PipelineConfig()
    try:
        parts = {name: _section(cls, d.get(name, {}), name) for name, cls in SECTIONS.items()}
        model = d.get("model", {})
        unknown = set(model) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown key(s) in model: {', '.join(sorted(unknown))}")
        train = TrainConfig.from_dict({**base.model.to_dict(), **model})
        cfg = PipelineConfig(parts["occupancy"], train, parts["volume"], parts["metrics"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if "seed" in d:
        cfg = cfg.with_seed(int(d["seed"]))
    return cfg


def load(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(d)


def override(cfg: PipelineConfig, section: str, **values) -> PipelineConfig:
    """Apply non-None values to one section (the flag layer)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section == "model":
        return replace(cfg, model=TrainConfig.from_dict({**cfg.model.to_dict(), **values}))
    return replace(cfg, **{section: replace(getattr(cfg, section), **values)})
