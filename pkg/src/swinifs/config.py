"""Experiment configuration: dataclass sections loaded from a flat ``section.key: value`` file."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .heatmaps import HeatmapConfig
from .losses import LossConfig
from .model import ModelConfig

SEED_ENV = "SWINIFS_SEED"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    milestones: list[int] = field(default_factory=lambda: [250_000, 400_000])
    lr_decay: float = 0.5
    batch_size: int = 16
    max_iters: int = 500_000
    seed: int = 0
    checkpoint_every: int = 5_000
    eval_every: int = 10_000
    scale: int = 4
    dtype: str = "float32"
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.milestones = [int(m) for m in self.milestones]
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if any(b >= a for a, b in zip(self.milestones[1:], self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class DataConfig:
    train_manifest: str = ""
    test_manifest: str = ""
    margin: float = 0.5
    on_the_fly: bool = False
    noise_sigma: float = 0.0


@dataclass
class MetricsConfig:
    lpips_net: str = "alexnet"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    heatmap: HeatmapConfig = field(default_factory=HeatmapConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.model.scale != self.train.scale:
            raise ValueError(f"model.scale={self.model.scale} but train.scale={self.train.scale}")

    def to_flat(self) -> dict:
        flat = {}
        for f in fields(self):
            for key, value in asdict(getattr(self, f.name)).items():
                flat[f"{f.name}.{key}"] = list(value) if isinstance(value, tuple) else value
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        sections: dict[str, dict] = {f.name: {} for f in fields(cls)}
        types = {f.name: f.default_factory for f in fields(cls)}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section not in sections or not name:
                raise KeyError(f"unknown config key {key!r}")
            known = {f.name for f in fields(types[section])}
            if name not in known:
                raise KeyError(f"unknown config key {key!r}")
            sections[section][name] = value
        # a bare train.scale or model.scale sets both
        for a, b in (("model", "train"), ("train", "model")):
            if "scale" in sections[a] and "scale" not in sections[b]:
                sections[b]["scale"] = sections[a]["scale"]
        return cls(**{name: types[name](**vals) for name, vals in sections.items()})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            flat = yaml.safe_load(fh) or {}
        cfg = cls.from_flat(flat)
        base = Path(path).parent
        for attr in ("train_manifest", "test_manifest"):
            value = getattr(cfg.data, attr)
            if value and not Path(value).is_absolute():
                setattr(cfg.data, attr, str(base / value))
        return cfg

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_flat(), fh, sort_keys=True)


def resolve_seed(seed: int) -> int:
    """Root seed, overridden by the SWINIFS_SEED environment variable when set."""
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else int(seed)


def micro_config(**train_overrides) -> ExperimentConfig:
    """Small model for tests and desk-scale smoke runs."""
    train = dict(batch_size=2, max_iters=2000, checkpoint_every=0, eval_every=0, out_dir="")
    train.update(train_overrides)
    scale = train.get("scale", 4)
    return ExperimentConfig(
        model=ModelConfig(embed_dim=32, num_rstb=2, stl_per_rstb=2, num_heads=2, window_size=4, scale=scale),
        train=TrainConfig(**train),
        loss=LossConfig(extractor="random_test"),
        metrics=MetricsConfig(lpips_net="random_test"),
    )
