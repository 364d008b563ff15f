"""JSON run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import (Splits, load_cifar10, load_cifar100, load_raw, quadrant_dataset, stratified_subset,
                   synthetic_dataset)
from .distill import DistillConfig
from .finetune import FinetuneConfig
from .views import AugmentConfig, ViewConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DataConfig:
    name: str = "synthetic"
    path: str | None = None
    train_path: str | None = None
    test_path: str | None = None
    subset: int | None = None
    test_subset: int | None = None
    subset_seed: int = 0
    n_per_class: int = 50
    n_test_per_class: int | None = None
    num_classes: int = 10
    image_size: int = 32
    noise: float = 0.05


@dataclass
class CorruptedSet:
    name: str
    path: str


@dataclass
class EvalConfig:
    checkpoint: str | None = None
    corrupted: list = field(default_factory=list)
    attention_images: int = 8
    batch_size: int = 256


@dataclass
class CompareConfig:
    schemes: list = field(default_factory=lambda: ["uniform", "xavier", "truncated-normal", "self-supervised"])
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    checkpoint: str | None = None
    dataset: DataConfig = field(default_factory=DataConfig)
    vit: ViTConfig = field(default_factory=lambda: ViTConfig(depth=4, dim=96, heads=4))
    views: ViewConfig = field(default_factory=ViewConfig.cifar)
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(epochs=30, warmup_epochs=10))
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(epochs=30))
    eval: EvalConfig = field(default_factory=EvalConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vit"]["image_size"] = list(self.vit.image_size)
        return d


_NESTED = {"dataset": DataConfig, "vit": ViTConfig, "views": ViewConfig, "distill": DistillConfig,
           "finetune": FinetuneConfig, "eval": EvalConfig, "compare": CompareConfig}


def _build(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(path, f"expected an object, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = dict(values)
    if cls is ViewConfig:
        if "global_augs" in kwargs:
            kwargs["global_augs"] = [_build(AugmentConfig, a, f"{path}.global_augs[{i}]")
                                     for i, a in enumerate(kwargs["global_augs"])]
        if "local_aug" in kwargs:
            kwargs["local_aug"] = _build(AugmentConfig, kwargs["local_aug"], f"{path}.local_aug")
    if cls is EvalConfig and "corrupted" in kwargs:
        kwargs["corrupted"] = [_build(CorruptedSet, c, f"{path}.corrupted[{i}]")
                               for i, c in enumerate(kwargs["corrupted"])]
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from None


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(key, "unknown key")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = _build(_NESTED[key], value, key) if key in _NESTED else value
    cfg = RunConfig(**kwargs)
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return parse_config(raw)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_dataset(dc: DataConfig) -> Splits:
    if dc.name == "cifar10":
        splits = load_cifar10(dc.path)
    elif dc.name == "cifar100":
        splits = load_cifar100(dc.path)
    elif dc.name == "raw":
        splits = Splits(load_raw(dc.train_path), load_raw(dc.test_path))
    elif dc.name == "synthetic":
        splits = synthetic_dataset(dc.subset_seed, dc.n_per_class, dc.num_classes, dc.image_size, dc.noise,
                                   dc.n_test_per_class)
    elif dc.name == "quadrant":
        n_test = dc.n_test_per_class if dc.n_test_per_class is not None else dc.n_per_class
        splits = quadrant_dataset(dc.subset_seed, dc.n_per_class * dc.num_classes, n_test * dc.num_classes,
                                  dc.num_classes, dc.image_size, dc.noise)
    else:
        raise ConfigError("dataset.name", f"unknown dataset {dc.name!r}")
    if dc.subset or dc.test_subset:
        train = stratified_subset(splits.train, dc.subset, dc.subset_seed) if dc.subset else splits.train
        test = stratified_subset(splits.test, dc.test_subset, dc.subset_seed) if dc.test_subset else splits.test
        splits = Splits(train, test)
    return splits
