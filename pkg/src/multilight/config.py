"""Experiment configuration stored as TOML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .field import FieldConfig
from .training import LossWeights, TrainConfig

LIGHT_SETTINGS = ("single", "multiple", "random", "all-grid")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    light_setting: str = "multiple"
    views: int = 50
    test_views: int = 5
    lights: int | None = None  # None: 1 for single, 4 for multiple, 37 otherwise
    frames_per_view: int = 4  # random setting only
    resolution: int = 64
    gamma: float = 1 / 2.2
    camera_radius: float = 3.0
    fov_deg: float = 40.0
    light_radius: float = 4.0

    def __post_init__(self):
        if self.light_setting not in LIGHT_SETTINGS:
            raise ConfigError(f"light_setting must be one of {LIGHT_SETTINGS}, got {self.light_setting!r}")
        if self.light_setting == "single" and self.lights not in (None, 1):
            raise ConfigError("light_setting 'single' uses exactly one light")
        if self.views < 1 or self.test_views < 0 or self.resolution < 11:
            raise ConfigError("need views >= 1, test_views >= 0 and resolution >= 11")
        if self.lights is not None and self.lights < 1:
            raise ConfigError("lights must be >= 1")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")

    @property
    def light_count(self) -> int:
        if self.lights is not None:
            return self.lights
        return {"single": 1, "multiple": 4}.get(self.light_setting, 37)


@dataclass
class PseudoConfig:
    eps_s: float = 0.05
    k: int = 2
    n_random: int = 4
    policy: str = ""  # "" follows the dataset pairing

    def __post_init__(self):
        if self.policy not in ("", "dataset", "relight"):
            raise ConfigError("pseudo.policy must be '', 'dataset' or 'relight'")
        if not self.eps_s > 0 or self.k < 1:
            raise ConfigError("pseudo.eps_s must be > 0 and pseudo.k >= 1")


@dataclass
class RenderConfig:
    n_samples: int = 64
    n_importance: int = 64


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_root: str = "runs/experiment"
    scene: str = ""  # scene JSON; "" selects the built-in reference scene
    lambertian: bool = False
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: FieldConfig = field(default_factory=FieldConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage=1))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage=2))
    loss: LossWeights = field(default_factory=LossWeights)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ConfigError("stage1/stage2 sections must have stage = 1 / 2")


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": FieldConfig,
    "stage1": TrainConfig,
    "stage2": TrainConfig,
    "loss": LossWeights,
    "pseudo": PseudoConfig,
    "render": RenderConfig,
}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            # TOML has no null; unset optionals are left out
            out[f.name] = {k: _plain(x) for k, x in asdict(v).items() if x is not None}
        else:
            out[f.name] = v
    return out


def _check_type(key, default, v):
    """Values must match the type of the field default (ints may stand in for floats)."""
    if default is None or v is None:
        return
    if isinstance(default, bool) or isinstance(v, bool):
        ok = isinstance(v, bool) == isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(v, (int, float))
    elif isinstance(default, int):
        ok = isinstance(v, int)
    elif isinstance(default, str):
        ok = isinstance(v, str)
    elif isinstance(default, tuple):
        ok = isinstance(v, (list, tuple)) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key} has the wrong type: {v!r}")


def _section(name, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    if name in ("stage1", "stage2"):
        want = 1 if name == "stage1" else 2
        if data.get("stage", want) != want:
            raise ConfigError(f"[{name}] stage must be {want}")
        data = {**data, "stage": want}
    defaults = cls()
    for k, v in data.items():
        _check_type(f"{name}.{k}", getattr(defaults, k), v)
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        if k in _SECTIONS:
            kw[k] = _section(k, _SECTIONS[k], v)
        else:
            kw[k] = v
    for k, typ in (("seed", int), ("output_root", str), ("scene", str), ("lambertian", bool)):
        if k in kw and not isinstance(kw[k], typ):
            raise ConfigError(f"{k} must be {typ.__name__}")
    return ExperimentConfig(**kw)


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from None
    return config_from_dict(data)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
