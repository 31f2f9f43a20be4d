"""Run configuration: structured key-value text files with dotted keys,
`--set key=value` overrides, typed sections, and canonical snapshots.

File format: one `key = value` per line, `#` comments; values are JSON
literals where they parse as such (numbers, booleans, lists), otherwise
bare strings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    image_size: int = 64
    scene_extent_mm: float = 96.0
    organs: int = 1
    organ_kinds: tuple = ("ellipsoid",)
    densities: tuple = (0.8,)
    mesh_resolution: int = 12
    volume_res: int = 48
    organ_radius_mm: float = 24.0
    organ_spacing_mm: float = 40.0
    translation_mm: float = 7.0
    scale_amp: float = 0.10
    bend_mm: float = 4.0
    max_deform_mm: float = 20.0
    coupled: bool = False
    jitter_train: bool = True
    n_train: int = 64
    n_test: int = 16
    seed: int = 0


@dataclass
class ArchConfig:
    gen_widths: tuple = (8, 16, 32)
    gcn_hidden: int = 64


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mu: float = 1.0
    lam: float = 0.1
    seed: int = 0
    mode: str = "SR"
    organ: int = 0


@dataclass
class AugmentSection:
    enabled: bool = True
    weight_max: tuple = (2.0, 1.0, 0.0)


@dataclass
class EvalSection:
    jitter: bool = False
    seed: int = 1000
    voxel_mm: float = 1.0


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.train.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.train.mu < 0 or self.train.lam < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.train.mode not in ("SR", "MR"):
            raise ConfigError(f"train.mode must be SR or MR, got {self.train.mode!r}")
        if self.data.image_size % 8 != 0:
            raise ConfigError("data.image_size must be divisible by 8 (3 pooling stages)")
        if self.data.organs < 1:
            raise ConfigError("data.organs must be >= 1")
        if len(self.data.densities) != self.data.organs:
            raise ConfigError("data.densities length must equal data.organs")
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("dataset split sizes must be >= 1")


_SECTIONS = {"data": DataConfig, "arch": ArchConfig, "train": TrainSection,
             "augment": AugmentSection, "eval": EvalSection}


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def config_from_flat(flat: dict) -> TrainConfig:
    cfg = TrainConfig()
    for key, value in flat.items():
        if "." not in key:
            raise ConfigError(f"key {key!r} is not of the form section.field")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
        valid = {f.name for f in fields(target)}
        if name not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        if isinstance(current, tuple):
            value = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        elif isinstance(current, bool):
            if isinstance(value, str):
                value = value.lower() in ("1", "true", "yes", "on")
            else:
                value = bool(value)
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(target, name, value)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> TrainConfig:
    flat = parse_config_text(Path(path).read_text()) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        flat[key.strip()] = _parse_value(raw)
    return config_from_flat(flat)


def flatten_config(cfg: TrainConfig) -> dict:
    flat = {}
    for section in _SECTIONS:
        for name, value in asdict(getattr(cfg, section)).items():
            if isinstance(value, tuple):
                value = list(value)
            flat[f"{section}.{name}"] = value
    return flat


def snapshot_text(cfg: TrainConfig) -> str:
    flat = flatten_config(cfg)
    lines = [f"{k} = {json.dumps(flat[k])}" for k in sorted(flat)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(snapshot_text(cfg).encode()).hexdigest()[:16]
