"""Run configuration: flat key=value INI sections, every key also settable as a flag."""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


@dataclass(frozen=True)
class TrainConfig:
    # [model]
    M: int = 25
    G: int = 4
    L: int = 3
    beta: float = 4.0
    # [loss]
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    # [train]
    lr: float = 0.0002
    head_lr: float = 0.002
    epochs: int = 8
    clips_per_sequence: int = 1
    clip_len: int = 5
    interval_min: int = 1
    interval_max: int = 10
    seed: int = 0
    # [lifecycle]
    spawn_threshold: float = 0.5
    miss_tolerance: int = 5
    emit_threshold: float = 0.5
    # [pld]
    pseudo_threshold: float = 0.05
    pld_background_weight: float = 0.5
    # [tgd]
    scale_min: float = 0.7
    scale_max: float = 1.3
    # [flags]
    enable_rfs: bool = True
    enable_pld: bool = False
    enable_tgd: bool = True
    mask_literal: bool = False
    # [encoder]
    obs_noise: float = 0.004
    obs_miss: float = 0.0
    feature_mean: float = 1.0
    feature_noise: float = 0.5
    clutter_rate: float = 1.0
    anchor_size: float = 0.1
    lost_iou: float = 0.05
    # [init]
    detect_logit_init: float = -2.0
    detect_feature_init: float = 3.0
    detect_gain_init: float = 0.3
    track_logit_init: float = _logit(0.6)
    track_feature_init: float = 3.0
    track_gain_init: float = 0.0
    track_bias_init: float = -1.5

    def __post_init__(self):
        if self.L < 2:
            raise ConfigError("L must be >= 2")
        if self.G < 1 or self.M < 1:
            raise ConfigError("M and G must be >= 1")
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if not 1 <= self.interval_min <= self.interval_max:
            raise ConfigError("interval range must satisfy 1 <= min <= max")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("scale range must satisfy 0 < min <= max")
        if self.miss_tolerance < 1:
            raise ConfigError("miss_tolerance must be >= 1")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w_cls, self.w_l1, self.w_giou)

    @property
    def scale_range(self) -> tuple[float, float]:
        return (self.scale_min, self.scale_max)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "model": ("M", "G", "L", "beta"),
    "loss": ("w_cls", "w_l1", "w_giou"),
    "train": ("lr", "head_lr", "epochs", "clips_per_sequence", "clip_len", "interval_min", "interval_max", "seed"),
    "lifecycle": ("spawn_threshold", "miss_tolerance", "emit_threshold"),
    "pld": ("pseudo_threshold", "pld_background_weight"),
    "tgd": ("scale_min", "scale_max"),
    "flags": ("enable_rfs", "enable_pld", "enable_tgd", "mask_literal"),
    "encoder": ("obs_noise", "obs_miss", "feature_mean", "feature_noise", "clutter_rate", "anchor_size", "lost_iou"),
    "init": ("detect_logit_init", "detect_feature_init", "detect_gain_init", "track_logit_init", "track_feature_init", "track_gain_init", "track_bias_init"),
}
FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce(key: str, value):
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            return value if isinstance(value, bool) else parse_bool(value)
        if kind == "int":
            return int(value)
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read a config file (unknown sections such as ``[scenario]`` are ignored) and apply overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise ConfigError(f"cannot read config {path}")
        for section, keys in SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key, value in parser[section].items():
                if key not in keys:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = coerce(key, value)
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    d = cfg.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {k: repr(d[k]) if isinstance(d[k], float) else str(d[k]) for k in keys}
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
