"""Grid enumeration, experiment runs and best-checkpoint selection."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import __version__
from . import config as config_mod
from .config import ConfigError, ExperimentConfig
from .datasets import BackgroundCorpus, DatasetBundle, DigitCorpus, SceneSpec, build, ingest_clevr
from .evaluation import ConvEmbedder, TorchScriptEmbedder, train_crop_embedder
from .training import MetricsRow, Trainer, read_metrics

log = logging.getLogger(__name__)

RELATIONAL_OPTIONS = [
    {"n_blocks": 0, "n_heads": 1, "share_across_blocks": False},
    {"n_blocks": 1, "n_heads": 1, "share_across_blocks": False},
    {"n_blocks": 1, "n_heads": 2, "share_across_blocks": False},
    {"n_blocks": 2, "n_heads": 1, "share_across_blocks": False},
    {"n_blocks": 2, "n_heads": 1, "share_across_blocks": True},
    {"n_blocks": 2, "n_heads": 2, "share_across_blocks": False},
    {"n_blocks": 2, "n_heads": 2, "share_across_blocks": True},
]


@dataclass
class GridSpec:
    axes: dict = field(default_factory=dict)  # dotted config path -> list of values
    seeds: list = field(default_factory=lambda: [0])
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for v in self.axes.values()])) if self.axes else 1


def baseline_grid(base: Optional[ExperimentConfig] = None, seeds=range(5)) -> GridSpec:
    """Unstructured single-generator GAN over loss, penalty, lambda, SN and Adam betas."""
    base = base or ExperimentConfig(name="baseline")
    raw = base.to_dict()
    raw["model"] = {**raw["model"], "k": 1, "relational": {"n_blocks": 0, "n_heads": 1,
                                                         "share_across_blocks": False,
                                                         "include_background": False},
                    "use_background": False}
    if raw["model"]["compose_mode"] == "threshold_alpha":
        raw["model"]["compose_mode"] = "sum_clip"
    return GridSpec(
        axes={
            "train.loss_kind": ["ns_gan", "wgan"],
            "train.penalty": ["none", "wgan_gp"],
            "train.penalty_weight": [1, 10],
            "train.spectral_norm": [False, True],
            "train.betas": [[0.5, 0.9], [0.5, 0.999], [0.9, 0.999]],
        },
        seeds=list(seeds),
        base=config_mod.from_dict(raw),
    )


def structured_grid(base: Optional[ExperimentConfig] = None, seeds=range(5)) -> GridSpec:
    """k-GAN search: SN on/off, K in {3, 4, 5}, seven relational variants."""
    base = base or ExperimentConfig(name="structured")
    raw = base.to_dict()
    raw["train"] = {**raw["train"], "loss_kind": "ns_gan", "penalty": "wgan_gp", "penalty_weight": 1,
                    "betas": [0.9, 0.999]}
    include_bg = bool(raw["model"]["relational"]["include_background"])
    return GridSpec(
        axes={
            "train.spectral_norm": [False, True],
            "model.k": [3, 4, 5],
            "model.relational": [{**opt, "include_background": include_bg} for opt in RELATIONAL_OPTIONS],
        },
        seeds=list(seeds),
        base=config_mod.from_dict(raw),
    )


PRESET_GRIDS = {"baseline": baseline_grid, "structured": structured_grid}


def _cell_name(base: str, assignment: dict) -> str:
    parts = []
    for key, value in assignment.items():
        short = key.split(".")[-1]
        if isinstance(value, dict):
            value = "b{n_blocks}h{n_heads}{s}".format(s="s" if value.get("share_across_blocks") else "",
                                                     **value)
        elif isinstance(value, (list, tuple)):
            value = "-".join(str(v) for v in value)
        parts.append(f"{short}={value}")
    return base + ("/" + ",".join(parts) if parts else "")


def enumerate_grid(spec: GridSpec) -> list[ExperimentConfig]:
    """Cartesian product over the axes in sorted key order (last axis fastest)."""
    keys = sorted(spec.axes)
    for k in keys:
        if not isinstance(spec.axes[k], (list, tuple)) or not spec.axes[k]:
            raise ConfigError([f"grid axis {k!r} must be a non-empty list"])
    log.info("grid has %d cells x %d seeds", spec.size, len(spec.seeds))
    base = spec.base.to_dict()
    out = []
    for values in itertools.product(*(spec.axes[k] for k in keys)):
        raw = base
        for k, v in zip(keys, values):
            raw = config_mod.set_path(raw, k, v)
        raw["name"] = _cell_name(spec.base.name, dict(zip(keys, values)))
        out.append(config_mod.from_dict(raw))
    return out


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    raw = cfg.to_dict()
    raw["train"]["seed"] = int(seed)
    return config_mod.from_dict(raw)


# -- runs ---------------------------------------------------------------------------

def run_dir_for(cfg: ExperimentConfig) -> Path:
    return cfg.resolved_output_root / cfg.name / f"seed{cfg.train.seed}"


def load_data(cfg: ExperimentConfig) -> DatasetBundle:
    d = cfg.data
    if d.dir is not None and (Path(d.dir) / "manifest.txt").exists():
        return DatasetBundle.load(d.dir)
    spec = SceneSpec(d.variant, seed=d.seed)
    if d.variant == "clevr":
        raise ConfigError(["clevr data must be ingested first; set data.dir to the ingested bundle"])
    digits = DigitCorpus.from_path(d.digits) if d.digits else DigitCorpus.bundled()
    backgrounds = None
    if d.variant == "cifar10_mm":
        backgrounds = BackgroundCorpus.from_path(d.backgrounds) if d.backgrounds else BackgroundCorpus.synthetic()
    bundle = build(spec, d.count, digits, backgrounds)
    if d.dir is not None:
        bundle.save(d.dir)
    return bundle


def load_embedder(cfg: ExperimentConfig, bundle: DatasetBundle, cache: Optional[Path] = None):
    kind = cfg.eval.embedder
    if kind not in ("builtin", "untrained"):
        return TorchScriptEmbedder(kind)
    if cache is not None and cache.exists():
        state = torch.load(cache, map_location="cpu", weights_only=True)
        model = ConvEmbedder(dim=int(state["dim"]), n_classes=int(state["n_classes"]))
        model.load_state_dict(state["weights"])
        return model.eval()
    if kind == "untrained":
        model = ConvEmbedder.untrained(cfg.train.seed)
    else:
        model = train_crop_embedder(bundle, steps=cfg.eval.embedder_steps, seed=cfg.data.seed)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"dim": model.dim, "n_classes": model.classifier.out_features,
                    "weights": model.state_dict()}, cache)
    return model


def run_experiment(cfg, resume: bool = True, bundle: Optional[DatasetBundle] = None,
                   stop_after: Optional[int] = None) -> Path:
    """Data check, training with periodic FID, best-checkpoint marker.

    ``cfg`` is an :class:`ExperimentConfig` or a path to a config file. An
    existing run directory is resumed from its newest checkpoint.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = config_mod.load(cfg)
    out = run_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    (out / "run.json").write_text(json.dumps(
        {"name": cfg.name, "tag": cfg.tag, "seed": cfg.train.seed, "code_version": __version__}, indent=1) + "\n")
    bundle = bundle if bundle is not None else load_data(cfg)
    embedder = load_embedder(cfg, bundle, out / "embedder.pt")
    trainer = Trainer(cfg.model, cfg.train, bundle, out_dir=out, embedder=embedder)
    for row in trainer.run(resume=resume, stop_after=stop_after):
        log.info("%s step %d d %.4f g %.4f gp %.4f fid %s", cfg.tag, row.step, row.d_loss, row.g_loss,
                 row.penalty, row.fid)
    return out


# -- selection ------------------------------------------------------------------------

@dataclass
class CheckpointRef:
    step: int
    fid: float
    path: Optional[Path] = None


def select_best(rows: Iterable[MetricsRow], run_dir=None) -> CheckpointRef:
    """Checkpoint with the lowest FID; ties go to the earliest step."""
    scored = [r for r in rows if r.fid is not None]
    if not scored:
        raise ValueError("no FID rows to select from")
    best = min(scored, key=lambda r: (r.fid, r.step))
    path = None if run_dir is None else Path(run_dir) / "checkpoints" / f"ckpt_{best.step:08d}.pt"
    return CheckpointRef(best.step, best.fid, path)


@dataclass
class SeedSummary:
    tag: str
    best: list  # CheckpointRef per seed

    @property
    def mean(self) -> float:
        return float(np.mean([b.fid for b in self.best]))

    @property
    def std(self) -> float:
        return float(np.std([b.fid for b in self.best]))


def summarize_runs(run_dirs: Sequence) -> dict:
    """Group run directories by config name and summarize per-seed best FIDs."""
    groups: dict = {}
    for d in run_dirs:
        d = Path(d)
        info = json.loads((d / "run.json").read_text())
        rows = read_metrics(d / "metrics.jsonl")
        try:
            ref = select_best(rows, d)
        except ValueError:
            continue
        groups.setdefault(info["name"], SeedSummary(info["tag"], [])).best.append(ref)
    return groups


def find_runs(root) -> list[Path]:
    return sorted(p.parent for p in Path(root).rglob("run.json"))


def ingest(src, out) -> DatasetBundle:
    bundle = ingest_clevr(src)
    bundle.save(out)
    return bundle
