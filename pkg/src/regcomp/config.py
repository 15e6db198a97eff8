"""Run configuration: one YAML file fully determines a pipeline run.

Every section maps onto a frozen dataclass. Unknown keys, wrong types and
out-of-range values raise :class:`ConfigError` naming the offending key, so
nothing in a config file is silently ignored.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .competency import CompetencyConfig
from .data import TEXTURES, SyntheticSpec
from .inpainter import InpainterConfig
from .perception import TrainConfig
from .regional import FILL_KINDS, METHODS
from .segmentation import FelzParams

__all__ = ["ConfigError", "DataConfig", "CroppingConfig", "FillConfig", "MethodsConfig",
           "EvaluationConfig", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Either a generated benchmark (``path`` unset) or a manifest directory."""

    path: str | None = None
    image_size: int = 64
    n_classes: int = 3
    patch_fraction: tuple = (0.08, 0.25)
    n_train: int = 300
    n_calibration: int = 60
    n_tune: int = 60
    n_test: int = 60
    textures: tuple = TEXTURES

    def __post_init__(self):
        object.__setattr__(self, "patch_fraction", tuple(self.patch_fraction))
        object.__setattr__(self, "textures", tuple(self.textures))
        if self.path is not None and not Path(self.path).exists():
            raise ValueError(f"dataset path {self.path!r} does not exist")
        self.synthetic_spec(0)

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.image_size, self.n_classes, self.patch_fraction, self.n_train,
                             self.n_calibration, self.n_tune, self.n_test, self.textures, seed)


@dataclass(frozen=True)
class CroppingConfig:
    grid_h: int = 8
    grid_w: int = 8
    margin: int | None = None

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dimensions must be positive")
        if self.margin is not None and self.margin < 0:
            raise ValueError("margin must be nonnegative")


@dataclass(frozen=True)
class FillConfig:
    """Candidate fills; the best one is picked on the tune split."""

    fills: tuple = FILL_KINDS
    blur_sigma: float = 3.0
    noise_std: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "fills", tuple(self.fills))
        if not self.fills:
            raise ValueError("at least one fill strategy is required")
        bad = [f for f in self.fills if f not in FILL_KINDS]
        if bad:
            raise ValueError(f"unknown fill strategies {bad}; choose from {FILL_KINDS}")
        if len(set(self.fills)) != len(self.fills):
            raise ValueError("duplicate fill strategies")
        if not self.blur_sigma > 0 or not self.noise_std > 0:
            raise ValueError("blur_sigma and noise_std must be positive")


@dataclass(frozen=True)
class MethodsConfig:
    enabled: tuple = METHODS
    cropping: CroppingConfig = field(default_factory=CroppingConfig)
    masking: FillConfig = field(default_factory=FillConfig)
    perturbation: FillConfig = field(default_factory=FillConfig)

    def __post_init__(self):
        object.__setattr__(self, "enabled", tuple(self.enabled))
        bad = [m for m in self.enabled if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if not self.enabled:
            raise ValueError("no methods enabled")
        if "combined" in self.enabled and not {"gradients", "reconstruction"} <= set(self.enabled):
            raise ValueError("'combined' needs both 'gradients' and 'reconstruction' enabled")


@dataclass(frozen=True)
class EvaluationConfig:
    grid: int = 101
    save_maps: bool = True

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError("threshold grid needs at least 2 points")


_SECTIONS = {
    "data": DataConfig,
    "classifier": TrainConfig,
    "competency": CompetencyConfig,
    "inpainter": InpainterConfig,
    "segmentation": FelzParams,
    "methods": MethodsConfig,
    "evaluation": EvaluationConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    classifier: TrainConfig = field(default_factory=TrainConfig)
    competency: CompetencyConfig = field(default_factory=CompetencyConfig)
    inpainter: InpainterConfig = field(default_factory=InpainterConfig)
    segmentation: FelzParams = field(default_factory=FelzParams)
    methods: MethodsConfig = field(default_factory=MethodsConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """sha256 of the canonical JSON form (independent of YAML layout)."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


_NESTED = {(MethodsConfig, "cropping"): CroppingConfig,
           (MethodsConfig, "masking"): FillConfig,
           (MethodsConfig, "perturbation"): FillConfig}


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in raw.items():
        path = f"{where}.{key}" if where else key
        sub = _SECTIONS.get(key) if cls is RunConfig else _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, path)
        else:
            kwargs[key] = _check_type(names[key], value, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _check_type(f: dataclasses.Field, value, path: str):
    default = f.default if f.default is not dataclasses.MISSING else None
    if default is None or value is None:
        if value is None and default is not None:
            raise ConfigError(f"{path}: null is not allowed")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_config(raw: dict | None) -> RunConfig:
    """Validate a plain mapping (e.g. parsed YAML) into a :class:`RunConfig`."""
    return _build(RunConfig, raw, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(raw)
