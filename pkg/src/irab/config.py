"""Experiment configuration documents (JSON, schema-versioned)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .scenes import SceneSpec
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class SplitSizes:
    n_labeled: int = 40
    n_unlabeled: int = 200
    n_test: int = 100

    def __post_init__(self):
        if min(self.n_labeled, self.n_unlabeled, self.n_test) < 0:
            raise ConfigError("split sizes must be >= 0")

    @property
    def total(self) -> int:
        return self.n_labeled + self.n_unlabeled + self.n_test


@dataclass
class ExperimentConfig:
    """Everything needed to regenerate data and repeat a training run."""

    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    split: SplitSizes = field(default_factory=SplitSizes)
    data_seed: int = 2020
    split_seed: int = 7
    output_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "train": self.train.to_dict(),
            "scene": self.scene.to_dict(),
            "split": {"n_labeled": self.split.n_labeled, "n_unlabeled": self.split.n_unlabeled,
                      "n_test": self.split.n_test},
            "data_seed": self.data_seed,
            "split_seed": self.split_seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        schema = d.get("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {schema} (expected {SCHEMA_VERSION})")
        allowed = {"schema", "train", "scene", "split", "data_seed", "split_seed", "output_dir"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown experiment config fields: {sorted(unknown)}")
        split = d.get("split", {})
        bad = set(split) - {"n_labeled", "n_unlabeled", "n_test"}
        if bad:
            raise ConfigError(f"unknown split fields: {sorted(bad)}")
        try:
            return cls(train=TrainConfig.from_dict(d.get("train", {})),
                       scene=SceneSpec.from_dict(d.get("scene", {})),
                       split=SplitSizes(**split),
                       data_seed=int(d.get("data_seed", 2020)),
                       split_seed=int(d.get("split_seed", 7)),
                       output_dir=d.get("output_dir"))
        except TypeError as e:
            raise ConfigError(f"invalid experiment config: {e}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return ExperimentConfig.from_dict(doc)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
