"""Run configuration: TOML file plus ``section.key=value`` overrides.

Documented keys (all optional)::

    seed = 42

    [paths]
    data_dir = "run/data"
    checkpoint_dir = "run/ckpt"
    report_dir = "run/reports"

    [grid]
    n_lat = 16
    n_lon = 32
    land_seed = 7
    land_fraction = 0.25

    [mesh]
    level = 2
    radius_factor = 0.6

    [data]
    n_train = 512
    n_valid = 128
    n_test = 128
    period = 64
    noise = 0.3

    [model]
    hidden = 16
    blocks = 2

    [training]      # see TrainConfig
    Q = 2
    ...

    [ablate]
    prc = "on"            # on | off
    pei = "on"            # on | off
    mana = "adaptive"     # adaptive | sum_only | mean_only
    climatology = "on"    # on | off

    [evaluate]
    leads = [1, 5, 10]
    n_ics = 10
    ic_stride = 1
    quantile = 0.95
    conventional_far = false
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data_dir: str = "run/data"
    checkpoint_dir: str = "run/ckpt"
    report_dir: str = "run/reports"


@dataclass
class GridConfig:
    n_lat: int = 16
    n_lon: int = 32
    land_seed: int = 7
    land_fraction: float = 0.25


@dataclass
class MeshConfig:
    level: int = 2
    radius_factor: float = 0.6


@dataclass
class DataConfig:
    n_train: int = 512
    n_valid: int = 128
    n_test: int = 128
    period: int = 64
    noise: float = 0.3  # forcing weather-noise amplitude

    @property
    def n_days(self) -> int:
        return self.n_train + self.n_valid + self.n_test


@dataclass
class NetConfig:
    hidden: int = 16
    blocks: int = 2


@dataclass
class Ablations:
    prc: str = "on"
    pei: str = "on"
    mana: str = "adaptive"
    climatology: str = "on"

    def __post_init__(self):
        for name in ("prc", "pei", "climatology"):
            v = getattr(self, name)
            if isinstance(v, bool):
                setattr(self, name, "on" if v else "off")
            elif v not in ("on", "off"):
                raise ConfigError(f"ablate.{name} must be 'on' or 'off', got {v!r}")
        if self.mana not in ("adaptive", "sum_only", "mean_only"):
            raise ConfigError(f"ablate.mana must be adaptive, sum_only or mean_only, got {self.mana!r}")

    @property
    def use_prc(self) -> bool:
        return self.prc == "on"

    @property
    def use_pei(self) -> bool:
        return self.pei == "on"

    @property
    def use_climatology(self) -> bool:
        return self.climatology == "on"


@dataclass
class EvalConfig:
    leads: list = field(default_factory=lambda: [1, 5, 10])
    n_ics: int = 10
    ic_stride: int = 1
    quantile: float = 0.95
    conventional_far: bool = False


def _default_training() -> TrainConfig:
    return TrainConfig(Q=2, M=2, N=3, pretrain_epochs=6, finetune_epochs=1, residual_epochs=3, lr=2e-3,
                       finetune_lr=1e-4, batch_size=8, samples_per_epoch=256)


@dataclass
class RunConfig:
    seed: int = 42
    paths: Paths = field(default_factory=Paths)
    grid: GridConfig = field(default_factory=GridConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: NetConfig = field(default_factory=NetConfig)
    training: TrainConfig = field(default_factory=_default_training)
    ablate: Ablations = field(default_factory=Ablations)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kwargs = {}
        sections = {f.name: f for f in fields(cls)}
        for key, value in d.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}; known: {sorted(sections)}")
            if key == "seed":
                kwargs[key] = int(value)
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sub = _SECTIONS[key]
            known = {f.name for f in fields(sub)}
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
            base = asdict(_default_training()) if key == "training" else {}
            try:
                kwargs[key] = sub(**{**base, **value})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{key}] section: {exc}") from exc
        return cls(**kwargs)


_SECTIONS = {
    "paths": Paths, "grid": GridConfig, "mesh": MeshConfig, "data": DataConfig, "model": NetConfig,
    "training": TrainConfig, "ablate": Ablations, "evaluate": EvalConfig,
}


def parse_value(text: str):
    """Interpret an override value as TOML, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    out = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a table")
        node[parts[-1]] = parse_value(value.strip())
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    d = RunConfig().to_dict()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with p.open("rb") as fh:
            user = tomllib.load(fh)
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key].update(value)
            else:
                d[key] = value
    return RunConfig.from_dict(apply_overrides(d, overrides))
