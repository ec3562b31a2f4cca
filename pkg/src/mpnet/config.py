"""Experiment configuration: one flat JSON document, validated against a bundled schema."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .data import BUILTIN_FIXTURES, AugmentConfig
from .models import SCALES, ArchScale
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def config_schema() -> dict:
    with resources.files("mpnet.resources").joinpath("config.schema.json").open() as fh:
        return json.load(fh)


@dataclass
class ExperimentConfig:
    model: str
    dataset: str
    seed: int
    scale: str | dict = "mini"
    input_side: int | None = None
    n_samples: int = 2000
    classes: list[str] | None = None
    folds: int = 10
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.001
    inner_val_fraction: float = 0.1
    noise_sigma: float = 0.05
    rotation_max_deg: float = 20.0
    h_flip: bool = True
    v_flip: bool = True
    shift_max_frac: float = 0.1
    fill_value: float = 0.0
    augment: bool = True
    freeze_policy: str = "backbone"
    bd_dropout: float = 0.5
    head_dropout: float = 0.5
    weights_in: str | None = None
    weights_policy: str = "partial"
    workers: int | None = None
    plots: bool = True
    output_dir: str = "out"
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @property
    def arch_scale(self) -> ArchScale:
        if isinstance(self.scale, str):
            scale = SCALES[self.scale]
        else:
            scale = ArchScale(**self.scale)
        if self.input_side is not None:
            scale = ArchScale(scale.channels_per_block, scale.convs_per_block, scale.head_width,
                              self.input_side, scale.channels_in)
        return scale

    @property
    def is_builtin(self) -> bool:
        return self.dataset in BUILTIN_FIXTURES

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def augment_config(self) -> AugmentConfig | None:
        if not self.augment:
            return None
        return AugmentConfig(self.noise_sigma, self.rotation_max_deg, self.h_flip, self.v_flip,
                             self.shift_max_frac, self.fill_value, self.seed)

    def train_config(self, workers: int = 1) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.freeze_policy, self.inner_val_fraction,
                           self.seed, self.lr, workers)

    def snapshot(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d.pop("workers")  # results do not depend on the worker count
        return d


def parse_config(doc: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None
    cfg = ExperimentConfig(**doc, base_dir=base_dir)
    if cfg.folds < 2:
        raise ConfigError(f"config field folds: k must be >= 2, got {cfg.folds}")
    try:
        cfg.arch_scale
        cfg.augment_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None
    if not cfg.is_builtin and not cfg.resolve(cfg.dataset).exists():
        raise ConfigError(f"config field dataset: {cfg.dataset} is neither a builtin fixture "
                          f"{BUILTIN_FIXTURES} nor an existing path")
    if cfg.weights_in is not None and not cfg.resolve(cfg.weights_in).is_file():
        raise ConfigError(f"config field weights_in: file {cfg.weights_in} does not exist")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parse_config(doc, path.parent)
