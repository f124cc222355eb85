"""Run configuration: one JSON file holding data, model and training
sections.  Unknown keys are rejected so typos fail loudly, and every run
logs its fully resolved configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .networks import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    kind: str = "synthetic"  # "synthetic" or "directory"
    count: int = 2000
    test_count: int = 256
    seed: int = 11
    train_styles: int = 50  # synthetic subjects 0..train_styles-1
    test_styles: int = 6  # held-out subjects train_styles..train_styles+test_styles-1
    root: str = ""  # directory mode: dataset root containing labels
    labels: str = "labels.csv"

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ValueError(f"data.kind must be synthetic or directory, got {self.kind!r}")
        if self.kind == "directory" and not self.root:
            raise ValueError("data.kind=directory requires data.root")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return {"data": asdict(self.data), "model": asdict(self.model), "train": asdict(self.train)}


def _build_section(cls, payload, section):
    if not isinstance(payload, dict):
        raise ValueError(f"config section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    return cls(**payload)


def run_config_from_dict(payload) -> RunConfig:
    if not isinstance(payload, dict):
        raise ValueError("run config must be a JSON object")
    unknown = set(payload) - {"data", "model", "train"}
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    return RunConfig(
        data=_build_section(DataConfig, payload.get("data", {}), "data"),
        model=_build_section(ModelConfig, payload.get("model", {}), "model"),
        train=_build_section(TrainConfig, payload.get("train", {}), "train"),
    )


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return run_config_from_dict(json.load(fh))


def save_resolved_config(path, cfg: RunConfig):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:8]
