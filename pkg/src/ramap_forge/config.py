"""Run configuration: one JSON document, validated up front, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .conditioning import GacConfig
from .core import ClassCatalog, ObjectClass, RadarGeometry
from .dataset import DEFAULT_SCENES, SceneConfig
from .diffusion import DiffusionSchedule, OptimizerConfig
from .errors import ConfigError
from .tcr import TcrConfig


@dataclass(frozen=True)
class ScheduleConfig:
    n_steps: int = 100
    beta_start: float | None = None
    beta_end: float | None = None

    def build(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.n_steps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 8
    n_stages: int = 3
    kernel: int = 3
    compute_dtype: str = "float64"


@dataclass(frozen=True)
class EvalConfig:
    min_score: float = 0.1
    max_peaks: int = 20
    nms_threshold: float = 0.5
    split: str = "test"


@dataclass(frozen=True)
class RunConfig:
    geometry: RadarGeometry = RadarGeometry()
    catalog: ClassCatalog = ClassCatalog()
    gac: GacConfig = GacConfig()
    tcr: TcrConfig = TcrConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    scenes: tuple[SceneConfig, ...] = DEFAULT_SCENES
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    split_fraction: float = 0.8

    def __post_init__(self):
        for s in self.scenes:
            if len(s.class_probs) != len(self.catalog):
                raise ConfigError(f"scene {s.name!r}: {len(s.class_probs)} class probabilities "
                                  f"for {len(self.catalog)} classes")
        if not self.scenes:
            raise ConfigError("at least one scene is required")
        if not (0 < self.split_fraction < 1):
            raise ConfigError("split_fraction must lie in (0, 1)")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            self.gac.check_coverage(self.geometry)
            self.schedule.build()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _to_jsonable(obj):
    if isinstance(obj, ClassCatalog):
        return [_to_jsonable(c) for c in obj.classes]
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ConfigError(f"non-finite value {obj} in config")
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = tuple(_tupleize(v) for v in value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _tupleize(v):
    return tuple(_tupleize(x) for x in v) if isinstance(v, list) else v


SECTIONS = {
    "geometry": RadarGeometry,
    "gac": GacConfig,
    "tcr": TcrConfig,
    "schedule": ScheduleConfig,
    "denoiser": DenoiserConfig,
    "optimizer": OptimizerConfig,
    "eval": EvalConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kwargs = {}
    for key, cls in SECTIONS.items():
        if key in data:
            kwargs[key] = _build(cls, data[key], key)
    if "catalog" in data:
        if not isinstance(data["catalog"], list):
            raise ConfigError("catalog: expected a list of classes")
        classes = tuple(_build(ObjectClass, c, f"catalog[{k}]") for k, c in enumerate(data["catalog"]))
        try:
            kwargs["catalog"] = ClassCatalog(classes)
        except ValueError as exc:
            raise ConfigError(f"catalog: {exc}") from None
    if "scenes" in data:
        if not isinstance(data["scenes"], list):
            raise ConfigError("scenes: expected a list")
        kwargs["scenes"] = tuple(_build(SceneConfig, s, f"scenes[{k}]") for k, s in enumerate(data["scenes"]))
    for key in ("seed", "split_fraction"):
        if key in data:
            kwargs[key] = data[key]
    if "seed" in kwargs and (not isinstance(kwargs["seed"], int) or isinstance(kwargs["seed"], bool)):
        raise ConfigError("seed must be an integer")
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(data)


def with_overrides(config: RunConfig, **changes) -> RunConfig:
    """Replace top-level or ``section.key`` values; None entries are ignored."""
    top, nested = {}, {}
    for key, value in changes.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = value
        else:
            top[key] = value
    for section, values in nested.items():
        try:
            top[section] = dataclasses.replace(getattr(config, section), **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    try:
        return dataclasses.replace(config, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
