"""Experiment configuration: flat ``section.key = value`` text files.

Lines starting with ``#`` are comments. ``preset = desk`` (default) or
``preset = paper-scale`` selects the baseline values before the remaining
keys are applied. Unknown keys are rejected. ``P2REC_OUT`` in the
environment overrides ``output_dir``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import FusionConfig
from .backbone import BackboneConfig
from .data import ConfigError, SyntheticSpec
from .preference import LoRAConfig, ProxyConfig, SFTConfig


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    format: str = "tsv"
    num_users: int = 200
    num_items: int = 100
    num_categories: int = 8
    sharpness: float = 50.0
    min_len: int = 10
    max_len: int = 30
    corruption_rate: float = 0.0
    popularity_skew: float = 1.0

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(self.num_users, self.num_items, self.num_categories, self.sharpness,
                             (self.min_len, self.max_len), self.corruption_rate,
                             self.popularity_skew, seed)


@dataclass
class PregroupConfig:
    k: int = 16
    restarts: int = 5
    max_iter: int = 300
    distinct: bool = False
    source: str = "kmeans"


@dataclass
class EvalConfig:
    ks: tuple = (5, 10)
    mask_history: bool = True
    buckets: int = 5
    repeats: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    preset: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pregroup: PregroupConfig = field(default_factory=PregroupConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flat(self) -> dict[str, object]:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for g in dataclasses.fields(val):
                    out[f"{f.name}.{g.name}"] = getattr(val, g.name)
            else:
                out[f.name] = val
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.flat().items()))

    def hash(self) -> str:
        """Digest of every setting except the output location."""
        text = "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.flat().items()) if k != "output_dir")
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed derived from the root seed and the stage name."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(ss.generate_state(1)[0] & 0x7FFFFFFF)

    def validate(self):
        self.backbone.validate()
        self.sft.validate()
        self.fusion.validate()
        if self.data.source not in ("synthetic", "path"):
            raise ConfigError("data.source must be 'synthetic' or 'path'")
        if self.data.source == "path" and not self.data.path:
            raise ConfigError("data.path is required when data.source = path")
        if self.pregroup.source not in ("kmeans", "planted"):
            raise ConfigError("pregroup.source must be 'kmeans' or 'planted'")
        if self.pregroup.source == "planted" and self.data.source != "synthetic":
            raise ConfigError("pregroup.source = planted needs a synthetic dataset")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


PRESETS = {
    "desk": {},
    "paper-scale": {"backbone.dim": "256", "backbone.batch_size": "1024", "backbone.lr": "1e-4",
                    "sft.lr": "1e-4", "backbone.patience": "10"},
}


def apply_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    known = cfg.flat()
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(cfg, section), name, _parse(raw, known[key], key))
        else:
            setattr(cfg, key, _parse(raw, known[key], key))
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    items: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        items[key] = value
    preset = items.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = ExperimentConfig(preset=preset)
    apply_overrides(cfg, PRESETS[preset])
    apply_overrides(cfg, items)
    if os.environ.get("P2REC_OUT"):
        cfg.output_dir = os.environ["P2REC_OUT"]
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(path.read_text(), str(path))
