"""Experiment configuration: JSON schema, presets and environment overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .datagen import MprsConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "IMC_"


class ConfigError(ValueError):
    pass


@dataclass
class IoConfig:
    window: int = 700          # T_s
    stride: int = 50
    train_windows: int = 200  # N_s
    val_windows: int = 25
    val_stride: int = 100
    test_length: int = 1000
    noise_std: float = 0.01    # normalized units


@dataclass
class NetConfig:
    widths: list[int] = field(default_factory=lambda: [10, 10])
    init_seed: int = 0


@dataclass
class RefsConfig:
    count: int = 430
    length: int = 700
    split: list[int] | None = None     # default 380/40/10 proportions
    pool: int = 60                     # screened set-points the references draw from
    hold_min: int = 80                 # steps (2000 s)
    hold_max: int = 400                # steps (10000 s)
    map_density: int = 11
    inset: float = 0.02
    tol_y: float = 1e-3


@dataclass
class LoopConfig:
    hold: int = 600                    # steps per set-point (>= 5 tau_r)
    setpoints: list[list[float]] | None = None   # meters; default spans the feasible map
    spread: float = 0.5                # how far the default set-points reach toward the hull
    noise_std: float = 0.01
    settle_window: int = 10
    drift_threshold: float = 1e-4


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    plant_params: str | None = None
    tau_s: float = 25.0
    tau_r: float = 2000.0
    seed: int = 0
    output_dir: str = "runs/default"
    mprs: MprsConfig = field(default_factory=MprsConfig)
    io: IoConfig = field(default_factory=IoConfig)
    model: NetConfig = field(default_factory=NetConfig)
    controller: NetConfig = field(default_factory=lambda: NetConfig([5, 5, 5], 1))
    model_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=3e-3, batch_size=16, max_epochs=1000, patience=50))
    controller_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=3e-3, batch_size=16, max_epochs=2000, patience=60))
    refs: RefsConfig = field(default_factory=RefsConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in known else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict, check_paths: bool = True) -> ExperimentConfig:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema version {version}")
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg, check_paths)
    return cfg


def validate(cfg: ExperimentConfig, check_paths: bool = True) -> None:
    for name in ("model", "controller"):
        widths = getattr(cfg, name).widths
        if not widths or any(int(w) < 1 for w in widths):
            raise ConfigError(f"{name}.widths must be positive")
    for name in ("model_train", "controller_train"):
        tc = getattr(cfg, name)
        window = cfg.io.window if name == "model_train" else cfg.refs.length
        if tc.washout >= window:
            raise ConfigError(f"{name}.washout must be below the sequence length {window}")
    if cfg.io.window > cfg.io.test_length:
        raise ConfigError("io.test_length must be at least io.window")
    if check_paths and cfg.plant_params is not None and not Path(cfg.plant_params).exists():
        raise ConfigError(f"plant parameter file {cfg.plant_params} does not exist")


def apply_env(data: dict, environ=None) -> dict:
    """Override keys from ``IMC_<SECTION>__<KEY>=<json value>`` environment variables."""
    environ = os.environ if environ is None else environ
    data = copy.deepcopy(data)
    for var, raw in environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        path = var[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return data


def load(path=None, environ=None, check_paths: bool = True) -> ExperimentConfig:
    data = {} if path is None else json.loads(Path(path).read_text())
    return from_dict(apply_env(data, environ), check_paths)


def preset(name: str) -> dict:
    """Named configurations: ``full`` (full scale), ``desk`` (acceptance scale), ``smoke``."""
    if name == "full":
        return {}
    if name == "desk":
        return {
            "io": {"window": 300, "stride": 50, "train_windows": 100, "val_windows": 25,
                   "val_stride": 100, "test_length": 1000},
            "model_train": {"lr": 3e-3, "batch_size": 16, "max_epochs": 300, "patience": 50},
            "controller_train": {"lr": 3e-3, "batch_size": 16, "max_epochs": 400, "patience": 100},
            "refs": {"count": 150, "length": 600, "split": [120, 20, 10], "pool": 60},
        }
    if name == "smoke":
        return {
            "io": {"window": 120, "stride": 40, "train_windows": 20, "val_windows": 5,
                   "val_stride": 40, "test_length": 300},
            "model": {"widths": [4], "init_seed": 0},
            "controller": {"widths": [3], "init_seed": 1},
            "model_train": {"lr": 1e-2, "batch_size": 10, "max_epochs": 50, "patience": 20, "washout": 20},
            "controller_train": {"lr": 1e-2, "batch_size": 10, "max_epochs": 50, "patience": 20,
                                 "washout": 20},
            "refs": {"count": 20, "length": 200, "split": [14, 4, 2], "pool": 8, "hold_min": 40,
                     "hold_max": 100, "map_density": 7},
            "loop": {"hold": 200},
        }
    raise ConfigError(f"unknown preset {name!r}")
