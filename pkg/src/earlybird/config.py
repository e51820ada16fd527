"""Experiment configuration documents (JSON with nested sections).

Every key is validated before any computation starts; unknown keys are
rejected with the dotted path of the offending field.
"""

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError, SpecError
from .model import NetworkSpec, conv4, plan_layers, vgg_mini
from .train import TrainConfig

MODES = ("eb-train", "baseline", "sweep", "distances")
FORMATS = ("mnist-idx", "cifar10-bin")
PRESETS = {"conv4": conv4, "vgg-mini": vgg_mini}
OUTPUT_ROOT_ENV = "EARLYBIRD_OUTPUT_ROOT"


@dataclass
class DatasetConfig:
    format: str = "mnist-idx"
    root: str = "data/mnist"
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    val_fraction: float = 0.1
    synthesize: bool = False  # render stand-in digits into ``root`` when the IDX files are missing


@dataclass
class SweepConfig:
    over: str = "p"  # "p" or "draw_epoch"
    values: list = field(default_factory=lambda: [0.3, 0.5, 0.7])


@dataclass
class DistancesConfig:
    ckpt_dir: str = ""
    p: float = 0.3
    normalize: str = "per-pair"


@dataclass
class ExperimentConfig:
    mode: str = "eb-train"
    network: dict = field(default_factory=lambda: {"preset": "conv4"})
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    checkpoint_every_epoch: bool = False
    resume_from: Optional[str] = None
    sweep: SweepConfig = field(default_factory=SweepConfig)
    distances: DistancesConfig = field(default_factory=DistancesConfig)

    def network_spec(self):
        return network_spec_from(self.network)

    def output_path(self):
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self):
        return {
            "mode": self.mode,
            "network": dict(self.network),
            "dataset": _section_dict(self.dataset),
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "checkpoint_every_epoch": self.checkpoint_every_epoch,
            "resume_from": self.resume_from,
            "sweep": _section_dict(self.sweep),
            "distances": _section_dict(self.distances),
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _section_dict(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def network_spec_from(d):
    if not isinstance(d, dict):
        raise ConfigError("network: expected an object")
    if "preset" in d:
        extra = set(d) - {"preset", "input_shape", "num_classes"}
        if extra:
            raise ConfigError(f"network: unknown keys {sorted(extra)}")
        if d["preset"] not in PRESETS:
            raise ConfigError(f"network.preset: unknown preset {d['preset']!r} (choose from {sorted(PRESETS)})")
        kwargs = {}
        if "input_shape" in d:
            kwargs["input_shape"] = tuple(d["input_shape"])
        if "num_classes" in d:
            kwargs["num_classes"] = int(d["num_classes"])
        spec = PRESETS[d["preset"]](**kwargs)
    else:
        spec = NetworkSpec.from_dict(d)
    try:
        plan_layers(spec)
    except SpecError as exc:
        raise ConfigError(f"network: {exc}") from exc
    return spec


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{name}: expected true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}.{name}: expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.{name}: expected a number")
            value = float(value)
        elif isinstance(default, str) and value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}.{name}: expected a string")
        elif isinstance(default, (list, tuple)):
            if not isinstance(value, list):
                raise ConfigError(f"{path}.{name}: expected a list")
            value = type(default)(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("configuration must be an object")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    cfg = ExperimentConfig(
        mode=data.get("mode", "eb-train"),
        network=data.get("network", {"preset": "conv4"}),
        dataset=_build(DatasetConfig, data.get("dataset", {}), "dataset"),
        train=_build(TrainConfig, data.get("train", {}), "train"),
        output_dir=data.get("output_dir", "runs/default"),
        checkpoint_every_epoch=data.get("checkpoint_every_epoch", False),
        resume_from=data.get("resume_from"),
        sweep=_build(SweepConfig, data.get("sweep", {}), "sweep"),
        distances=_build(DistancesConfig, data.get("distances", {}), "distances"),
    )
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.mode not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}, got {cfg.mode!r}")
    if not isinstance(cfg.output_dir, str) or not cfg.output_dir:
        raise ConfigError("output_dir: expected a non-empty string")
    if not isinstance(cfg.checkpoint_every_epoch, bool):
        raise ConfigError("checkpoint_every_epoch: expected true/false")
    if cfg.dataset.format not in FORMATS:
        raise ConfigError(f"dataset.format: must be one of {FORMATS}")
    for name in ("subset", "test_subset"):
        v = getattr(cfg.dataset, name)
        if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
            raise ConfigError(f"dataset.{name}: expected a positive integer")
    if not 0 <= cfg.dataset.val_fraction < 1:
        raise ConfigError("dataset.val_fraction: must lie in [0, 1)")
    if cfg.dataset.synthesize and cfg.dataset.format != "mnist-idx":
        raise ConfigError("dataset.synthesize: only supported for mnist-idx")
    if cfg.mode == "distances":
        if not cfg.distances.ckpt_dir:
            raise ConfigError("distances.ckpt_dir: required in distances mode")
        if not 0 < cfg.distances.p < 1:
            raise ConfigError("distances.p: must lie in (0, 1)")
    else:
        cfg.network_spec()
        try:
            cfg.train.validate()
        except ConfigError as exc:
            raise ConfigError(f"train: {exc}") from exc
    if cfg.distances.normalize not in ("per-pair", "matrix-minmax"):
        raise ConfigError("distances.normalize: must be per-pair or matrix-minmax")
    if cfg.mode == "sweep":
        if cfg.sweep.over not in ("p", "draw_epoch"):
            raise ConfigError("sweep.over: must be 'p' or 'draw_epoch'")
        if not cfg.sweep.values:
            raise ConfigError("sweep.values: must not be empty")
        for v in cfg.sweep.values:
            if cfg.sweep.over == "p" and not (isinstance(v, (int, float)) and 0 < v < 1):
                raise ConfigError(f"sweep.values: pruning ratio {v!r} outside (0, 1)")
            if cfg.sweep.over == "draw_epoch" and not (isinstance(v, int) and 1 <= v <= cfg.train.search_epochs):
                raise ConfigError(f"sweep.values: draw epoch {v!r} outside [1, {cfg.train.search_epochs}]")
    return cfg


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)
