"""Pipeline configuration as a flat ``section.key`` JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decision import METHODS
from .initial_align import AlignParams
from .nonrigid.demons import DemonsParams
from .nonrigid.local_affine import LocalAffineParams
from .preprocess import ResolutionPolicy

__all__ = ["TpsParams", "Resolutions", "PipelineConfig", "ConfigError"]

ENGINES = METHODS[:-1]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TpsParams:
    lam: float = 10.0
    snap: float = 2.0
    max_points: int = 1000
    grid_step: int = 4

    def __post_init__(self):
        if self.lam < 0 or self.snap <= 0 or self.max_points < 3 or self.grid_step < 1:
            raise ValueError("invalid TPS parameters")


@dataclass(frozen=True)
class Resolutions:
    initial: ResolutionPolicy = ResolutionPolicy("max_side", 2048)
    local_affine: ResolutionPolicy = ResolutionPolicy("min_side", 1024)
    demons: ResolutionPolicy = ResolutionPolicy("min_side", 4096)
    mind_demons: ResolutionPolicy = ResolutionPolicy("min_side", 3000)
    tps: ResolutionPolicy = ResolutionPolicy("min_side", 4096)
    decision: ResolutionPolicy = ResolutionPolicy("min_side", 1024)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_dir: str = "registration_output"
    jobs: int = 1
    engine_workers: int = 4
    tile: int = 64
    engines: tuple = ENGINES
    resolution: Resolutions = field(default_factory=Resolutions)
    align: AlignParams = field(default_factory=AlignParams)
    local_affine: LocalAffineParams = field(default_factory=LocalAffineParams)
    demons: DemonsParams = field(default_factory=DemonsParams)
    mind_demons: DemonsParams = field(default_factory=DemonsParams)
    tps: TpsParams = field(default_factory=TpsParams)

    def __post_init__(self):
        object.__setattr__(self, "engines", tuple(self.engines))
        unknown = set(self.engines) - set(ENGINES)
        if unknown:
            raise ValueError(f"unknown engines: {sorted(unknown)}")
        if self.jobs < 1 or self.engine_workers < 1:
            raise ValueError("worker counts must be >= 1")
        if self.tile < 1:
            raise ValueError("tile must be >= 1")

    def align_params(self) -> AlignParams:
        """Alignment parameters with the pipeline seed applied."""
        return dataclasses.replace(self.align, seed=self.seed)

    # flat key/value round trip --------------------------------------------
    def to_flat(self) -> dict:
        return _flatten(self, "")

    @classmethod
    def from_flat(cls, flat: dict) -> PipelineConfig:
        """Defaults overridden by ``flat``; unknown keys are an error."""
        known = cls().to_flat()
        extra = sorted(set(flat) - set(known))
        if extra:
            raise ConfigError(f"unknown configuration keys: {', '.join(extra)}")
        try:
            return _build(cls, "", {**known, **flat})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        return cls.from_flat(data)

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)


# the pipeline seed is the only seed
_SKIP = {"align.seed"}


def _flatten(obj, prefix) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        if key in _SKIP:
            continue
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            out.update(_flatten(val, key + "."))
        elif isinstance(val, tuple):
            out[key] = list(val)
        else:
            out[key] = val
    return out


def _build(cls, prefix, flat):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in _SKIP:
            continue
        ref = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(ref):
            kwargs[f.name] = _build(type(ref), key + ".", flat)
        else:
            kwargs[f.name] = _coerce(key, flat[key], ref)
    return cls(**kwargs)


def _coerce(key, val, ref):
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{key}: expected true/false")
        return val
    if isinstance(ref, int):
        if isinstance(val, bool) or not isinstance(val, (int, float)) or int(val) != val:
            raise ConfigError(f"{key}: expected an integer")
        return int(val)
    if isinstance(ref, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(val)
    if isinstance(ref, str):
        if not isinstance(val, str):
            raise ConfigError(f"{key}: expected a string")
        return val
    if isinstance(ref, tuple):
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(val)
    return val
