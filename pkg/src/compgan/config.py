"""Experiment configuration files.

A config is a versioned YAML document with ``data``, ``model``, ``train`` and
``eval`` sections. Unknown keys are errors, and validation reports every
violated constraint at once.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .datasets import VARIANTS
from .models import ModelConfig
from .relational import RelationalConfig
from .training import TrainConfig

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "COMPGAN_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  - " + "\n  - ".join(self.problems))


@dataclass(frozen=True)
class DataSettings:
    variant: str = "independent_mm"
    dir: Optional[str] = None  # prebuilt bundle; built and cached here if missing
    count: int = 60_000
    seed: int = 0
    digits: Optional[str] = None  # MNIST npz/IDX directory; bundled digits when unset
    backgrounds: Optional[str] = None  # CIFAR10 npz/batch directory; synthetic when unset


@dataclass(frozen=True)
class EvalSettings:
    embedder: str = "builtin"  # builtin | untrained | path to a TorchScript file
    embedder_steps: int = 2000


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_root: str = "runs"
    version: int = CONFIG_VERSION

    @property
    def tag(self) -> str:
        return self.model.tag

    @property
    def resolved_output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV, self.output_root))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(self.train.betas)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dump())
        return path


def consistency_problems(cfg: ExperimentConfig) -> list[str]:
    out = []
    expected = 128 if cfg.data.variant == "clevr" else 64
    if cfg.model.image_size != expected:
        out.append(f"model.image_size={cfg.model.image_size} but {cfg.data.variant} images are {expected}px")
    if cfg.model.compose_mode == "threshold_alpha" and cfg.data.variant != "rgb_occluded_mm":
        out.append("threshold_alpha composition is only meant for rgb_occluded_mm")
    if cfg.model.use_background and cfg.data.variant in ("independent_mm", "triplet_mm", "rgb_occluded_mm"):
        out.append(f"{cfg.data.variant} has no background; drop model.use_background")
    if cfg.model.relational.include_background and not cfg.model.use_background:
        out.append("relational.include_background requires model.use_background")
    if cfg.version != CONFIG_VERSION:
        out.append(f"config version {cfg.version} is not supported (expected {CONFIG_VERSION})")
    return out


def _unknown_keys(section: str, raw: dict, cls) -> list[str]:
    names = {f.name for f in dataclasses.fields(cls)}
    return [f"unknown key {section}{k}" for k in raw if k not in names]


def _build(section: str, cls, raw, problems: list):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        problems.append(f"{section} must be a mapping")
        return None
    problems.extend(_unknown_keys(section + ".", raw, cls))
    kwargs = {k: v for k, v in raw.items() if k in {f.name for f in dataclasses.fields(cls)}}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        problems.append(f"{section}: {e}")
        return None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    problems = _unknown_keys("", raw, ExperimentConfig)
    model_raw = dict(raw.get("model") or {})
    rel_raw = model_raw.pop("relational", None)
    relational = _build("model.relational", RelationalConfig, rel_raw, problems)
    model = None
    if relational is not None:
        model = _build("model", ModelConfig, {**model_raw, "relational": relational}, problems)
    parts = dict(
        data=_build("data", DataSettings, raw.get("data"), problems),
        model=model,
        train=_build("train", TrainConfig, raw.get("train"), problems),
        eval=_build("eval", EvalSettings, raw.get("eval"), problems),
    )
    if parts["data"] is not None and parts["data"].variant not in VARIANTS:
        problems.append(f"data.variant must be one of {VARIANTS}")
    if problems:
        raise ConfigError(problems)
    top = {k: raw[k] for k in ("name", "output_root", "version") if k in raw}
    cfg = ExperimentConfig(**top, **parts)
    problems = consistency_problems(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: {e}"]) from e
    return from_dict(raw or {})


def set_path(raw: dict, dotted: str, value) -> dict:
    """Copy of nested dict ``raw`` with ``dotted`` key path set to ``value``."""
    out = dict(raw)
    head, _, rest = dotted.partition(".")
    if rest:
        child = out.get(head)
        if not isinstance(child, dict):
            raise ConfigError([f"unknown config section {head!r} in axis {dotted!r}"])
        out[head] = set_path(child, rest, value)
    else:
        if head not in out:
            raise ConfigError([f"unknown config key {dotted!r}"])
        out[head] = value
    return out
