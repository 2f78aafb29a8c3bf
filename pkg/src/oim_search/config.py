"""Experiment configuration: a YAML file with nested sections, one master seed."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .synth import DetectorConfig, SynthConfig
from .trainer import TrainConfig


@dataclass
class ProtocolSettings:
    gallery_sizes: list[int] = field(default_factory=lambda: [10, 20, 40])
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    iou_threshold: float = 0.5
    sweep_gallery_size: int = 20


@dataclass
class SweepSettings:
    eval_every: int = 250
    recall_thresholds: list[float] = field(
        default_factory=lambda: [0.0, 0.2, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0])


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: ProtocolSettings = field(default_factory=ProtocolSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    out_dir: str = "runs/default"
    seed: int = 0

    def resolved(self, seed: Optional[int] = None) -> "ExperimentConfig":
        """Copy with every sub-seed derived from the master seed."""
        cfg = from_dict(to_dict(self))
        if seed is not None:
            cfg.seed = seed
        cfg.synth = dataclasses.replace(cfg.synth, seed=derive_seed(cfg.seed, "world"))
        cfg.train = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
        return cfg

    @property
    def detector_seed(self) -> int:
        return derive_seed(self.seed, "detector")

    def protocol_seed(self, i: int) -> int:
        return derive_seed(self.seed, f"protocol-{i}")


def derive_seed(master: int, name: str) -> int:
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


_SECTIONS = {
    "synth": SynthConfig,
    "detector": DetectorConfig,
    "train": TrainConfig,
    "protocol": ProtocolSettings,
    "sweep": SweepSettings,
}


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    d["synth"]["box_scale_range"] = list(d["synth"]["box_scale_range"])
    return d


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**values)


def from_dict(d: dict[str, Any]) -> ExperimentConfig:
    d = dict(d or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = _build(cls, dict(d.pop(name) or {}), name)
    for key in ("out_dir", "seed"):
        if key in d:
            kwargs[key] = d.pop(key)
    if d:
        raise ValueError(f"unknown top-level config keys: {sorted(d)}")
    return ExperimentConfig(**kwargs)


def load_config(path: Optional[str | Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh) or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
