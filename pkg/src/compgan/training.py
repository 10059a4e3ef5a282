"""Adversarial training: losses, gradient penalty, checkpoints and the update loop."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import DatasetBundle, sample_batch
from .models import Discriminator, ModelConfig, StructuredGenerator, sample_latents

log = logging.getLogger(__name__)

LOSS_KINDS = ("ns_gan", "wgan")
PENALTIES = ("none", "wgan_gp")
SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "ns_gan"
    penalty: str = "wgan_gp"
    penalty_weight: float = 1.0
    spectral_norm: bool = False
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    batch_size: int = 64
    total_steps: int = 1_000_000
    disc_steps_per_gen: int = 5
    checkpoint_every: int = 20_000
    log_every: int = 100
    fid_samples: int = 10_000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        problems = self.problems()
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.loss_kind not in LOSS_KINDS:
            out.append(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.penalty not in PENALTIES:
            out.append(f"penalty must be one of {PENALTIES}, got {self.penalty!r}")
        if self.penalty == "wgan_gp" and self.penalty_weight not in (1, 10):
            out.append(f"penalty_weight must be 1 or 10, got {self.penalty_weight}")
        if self.batch_size < 2:
            out.append("batch_size must be >= 2")
        if len(self.betas) != 2:
            out.append("betas must be a pair")
        if self.total_steps < 0 or self.checkpoint_every < 1 or self.disc_steps_per_gen < 1:
            out.append("total_steps must be >= 0; checkpoint_every and disc_steps_per_gen >= 1")
        if self.log_every < 1:
            out.append("log_every must be >= 1")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "full": dict(total_steps=1_000_000, batch_size=64, checkpoint_every=20_000, fid_samples=10_000),
    "desk": dict(total_steps=50_000, batch_size=64, checkpoint_every=1_000, fid_samples=2_000),
}


def preset(name: str, **overrides) -> TrainConfig:
    return TrainConfig(**{**PRESETS[name], **overrides})


# -- losses --------------------------------------------------------------------

def _check_scores(*scores):
    for s in scores:
        if s.numel() == 0:
            raise ValueError("score batch is empty")
    if len(scores) == 2 and scores[0].shape != scores[1].shape:
        raise ValueError(f"score batches differ in shape: {tuple(scores[0].shape)} vs {tuple(scores[1].shape)}")


def generator_loss(kind: str, scores_fake: torch.Tensor) -> torch.Tensor:
    _check_scores(scores_fake)
    if kind == "ns_gan":
        return F.softplus(-scores_fake).mean()
    if kind == "wgan":
        return -scores_fake.mean()
    raise ValueError(f"unknown loss kind {kind!r}")


def adversarial_losses(kind: str, scores_real: torch.Tensor, scores_fake: torch.Tensor):
    """Return ``(discriminator_loss, generator_loss)``.

    NS-GAN works on logits: ``-log sigmoid(s) = softplus(-s)``.
    """
    _check_scores(scores_real, scores_fake)
    if kind == "ns_gan":
        d_loss = F.softplus(-scores_real).mean() + F.softplus(scores_fake).mean()
    elif kind == "wgan":
        d_loss = scores_fake.mean() - scores_real.mean()
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return d_loss, generator_loss(kind, scores_fake)


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, fake: torch.Tensor,
                     weight: float, generator: Optional[torch.Generator] = None,
                     epsilon: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``weight * mean((||grad critic(x_hat)|| - 1)^2)`` on random interpolates.

    ``x_hat = eps * real + (1 - eps) * fake`` with one ``eps ~ U(0, 1)`` per sample.
    """
    if real.shape != fake.shape or real.shape[0] < 1:
        raise ValueError("real and fake batches must be non-empty and equally shaped")
    if epsilon is None:
        shape = (real.shape[0],) + (1,) * (real.dim() - 1)
        epsilon = torch.rand(shape, generator=generator, dtype=real.dtype, device=real.device)
    x_hat = epsilon * real + (1 - epsilon) * fake
    if not x_hat.requires_grad:
        x_hat.requires_grad_(True)
    scores = critic(x_hat)
    grad = None
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:  # critic ignores its input
        grad = torch.zeros_like(x_hat)
    norms = grad.flatten(1).norm(dim=1)
    if not torch.isfinite(norms).all():
        raise FloatingPointError(f"non-finite critic gradients at interpolates (norms={norms.tolist()})")
    return weight * ((norms - 1) ** 2).mean()


# -- checkpoints -----------------------------------------------------------------

def config_hash(model_cfg: ModelConfig) -> str:
    blob = json.dumps(model_cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, model_cfg: ModelConfig, step: int, generator: StructuredGenerator, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "model_config": model_cfg.to_dict(),
        "config_hash": config_hash(model_cfg),
        "step": int(step),
        "generator": generator.state_dict(),
        **extra,
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, model_cfg: Optional[ModelConfig] = None) -> dict:
    """Read a checkpoint, failing loudly on schema or config mismatch."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("schema_version") != SCHEMA_VERSION:
        found = payload.get("schema_version") if isinstance(payload, dict) else None
        raise CheckpointError(f"{path}: checkpoint schema {found!r}, expected {SCHEMA_VERSION}")
    stored = ModelConfig.from_dict(payload["model_config"])
    if config_hash(stored) != payload["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if model_cfg is not None and config_hash(model_cfg) != payload["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written for {stored}, not {model_cfg}")
    payload["model_config"] = stored
    return payload


def load_generator(path, model_cfg: Optional[ModelConfig] = None) -> StructuredGenerator:
    payload = load_checkpoint(path, model_cfg)
    gen = StructuredGenerator(payload["model_config"])
    gen.load_state_dict(payload["generator"])
    return gen.eval()


# -- training loop ------------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    d_loss: float
    g_loss: float
    penalty: float
    fid: Optional[float] = None
    wall_clock: float = field(default_factory=time.time)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def read_metrics(path) -> list[MetricsRow]:
    path = Path(path)
    if not path.exists():
        return []
    return [MetricsRow(**json.loads(ln)) for ln in path.read_text().splitlines() if ln.strip()]


class Trainer:
    """Alternating updates: one generator step followed by ``disc_steps_per_gen`` critic steps.

    One "step" is one generator update. All randomness comes from the train
    config seed: module initialization, the data stream and the latent/penalty
    stream each get their own derived generator.
    """

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, bundle: DatasetBundle,
                 out_dir=None, embedder=None, fid_reference=None):
        if bundle.spec.canvas != (model_cfg.image_size, model_cfg.image_size):
            raise ValueError(f"dataset canvas {bundle.spec.canvas} does not match model image size "
                             f"{model_cfg.image_size}")
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.bundle = bundle
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.embedder = embedder
        self._fid_reference = fid_reference
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(train_cfg.seed)
            self.generator = StructuredGenerator(model_cfg)
            self.discriminator = Discriminator(model_cfg, spectral_norm=train_cfg.spectral_norm)
        self.g_opt = torch.optim.Adam(self.generator.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
        self.d_opt = torch.optim.Adam(self.discriminator.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
        self.data_rng = np.random.default_rng([train_cfg.seed, 1])
        self.noise = torch.Generator().manual_seed(train_cfg.seed * 7919 + 2)
        self.step = 0
        self.best: Optional[dict] = None

    # state

    def state_dict(self) -> dict:
        return {
            "train_config": self.cfg.to_dict(),
            "discriminator": self.discriminator.state_dict(),
            "g_optimizer": self.g_opt.state_dict(),
            "d_optimizer": self.d_opt.state_dict(),
            "rng": {"data": self.data_rng.bit_generator.state, "noise": self.noise.get_state()},
            "best": self.best,
        }

    def save(self, path=None) -> Path:
        if path is None:
            path = self.checkpoint_path(self.step)
        return save_checkpoint(path, self.model_cfg, self.step, self.generator, **self.state_dict())

    def checkpoint_path(self, step: int) -> Path:
        if self.out_dir is None:
            raise ValueError("trainer has no output directory")
        return self.out_dir / "checkpoints" / f"ckpt_{step:08d}.pt"

    def load(self, path):
        payload = load_checkpoint(path, self.model_cfg)
        self.generator.load_state_dict(payload["generator"])
        self.discriminator.load_state_dict(payload["discriminator"])
        self.g_opt.load_state_dict(payload["g_optimizer"])
        self.d_opt.load_state_dict(payload["d_optimizer"])
        self.data_rng.bit_generator.state = payload["rng"]["data"]
        self.noise.set_state(payload["rng"]["noise"])
        self.best = payload.get("best")
        self.step = payload["step"]

    def latest_checkpoint(self) -> Optional[Path]:
        if self.out_dir is None:
            return None
        found = sorted((self.out_dir / "checkpoints").glob("ckpt_*.pt"))
        return found[-1] if found else None

    # updates

    def _real(self) -> torch.Tensor:
        return sample_batch(self.bundle, "train", self.cfg.batch_size, self.data_rng).tensor()

    def _fake(self) -> torch.Tensor:
        z = sample_latents(self.model_cfg, self.cfg.batch_size, generator=self.noise)
        return self.generator(z).image

    def discriminator_step(self):
        real = self._real()
        with torch.no_grad():
            fake = self._fake()
        d_loss, _ = adversarial_losses(self.cfg.loss_kind, self.discriminator(real), self.discriminator(fake))
        penalty = torch.zeros(())
        if self.cfg.penalty == "wgan_gp":
            try:
                penalty = gradient_penalty(self.discriminator, real, fake, self.cfg.penalty_weight,
                                           generator=self.noise)
            except FloatingPointError as e:
                raise TrainingDiverged(f"step {self.step}: {e}") from e
        total = d_loss + penalty
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite discriminator loss at step {self.step}")
        self.d_opt.zero_grad(set_to_none=True)
        total.backward()
        self.d_opt.step()
        return d_loss.item(), penalty.item()

    def generator_step(self) -> float:
        fake = self._fake()
        g_loss = generator_loss(self.cfg.loss_kind, self.discriminator(fake))
        if not torch.isfinite(g_loss):
            raise TrainingDiverged(f"non-finite generator loss at step {self.step}")
        self.g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        self.g_opt.step()
        self.d_opt.zero_grad(set_to_none=True)
        return g_loss.item()

    def train_step(self) -> MetricsRow:
        self.generator.train()
        self.discriminator.train()
        g = self.generator_step()
        d_losses, penalties = [], []
        for _ in range(self.cfg.disc_steps_per_gen):
            d, p = self.discriminator_step()
            d_losses.append(d)
            penalties.append(p)
        self.step += 1
        return MetricsRow(self.step, float(np.mean(d_losses)), g, float(np.mean(penalties)))

    # evaluation

    def fid(self) -> Optional[float]:
        if self.embedder is None:
            return None
        from .evaluation import compute_fid, real_stats

        n = self.cfg.fid_samples
        if self._fid_reference is None:
            self._fid_reference = real_stats(self.bundle, self.embedder, n)
        return compute_fid(self.generator, self.bundle, self.embedder, n,
                           seed=self.cfg.seed * 1_000_003 + self.step, reference=self._fid_reference)

    def _metrics_path(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / "metrics.jsonl"

    def _append(self, row: MetricsRow):
        path = self._metrics_path()
        if path is not None:
            with open(path, "a") as f:
                f.write(row.to_json() + "\n")

    def _mark_best(self, row: MetricsRow):
        if row.fid is None:
            return
        if self.best is None or row.fid < self.best["fid"]:
            self.best = {"step": row.step, "fid": row.fid}
            if self.out_dir is not None:
                (self.out_dir / "best.txt").write_text(
                    f"{self.checkpoint_path(row.step).name}\tstep={row.step}\tfid={row.fid!r}\n")

    def run(self, resume: bool = True, stop_after: Optional[int] = None) -> Iterator[MetricsRow]:
        """Train to ``total_steps``, yielding each logged metrics row.

        With ``resume``, continue from the newest checkpoint in ``out_dir``.
        ``stop_after`` ends the run early after that many steps (for
        interruption tests).
        """
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            latest = self.latest_checkpoint() if resume else None
            if latest is not None:
                self.load(latest)
                self._truncate_metrics(self.step)
                log.info("resumed from %s at step %d", latest, self.step)
            else:
                path = self._metrics_path()
                if path.exists():
                    path.unlink()
                self.save()
        executed = 0
        while self.step < self.cfg.total_steps:
            if stop_after is not None and executed >= stop_after:
                return
            row = self.train_step()
            executed += 1
            at_checkpoint = self.step % self.cfg.checkpoint_every == 0 or self.step == self.cfg.total_steps
            if at_checkpoint:
                row.fid = self.fid()
                self._mark_best(row)
            if at_checkpoint or self.step % self.cfg.log_every == 0:
                self._append(row)
                yield row
            if at_checkpoint and self.out_dir is not None:
                self.save()

    def _truncate_metrics(self, step: int):
        path = self._metrics_path()
        rows = [r for r in read_metrics(path) if r.step <= step]
        path.write_text("".join(r.to_json() + "\n" for r in rows))


def train(model_cfg: ModelConfig, bundle: DatasetBundle, train_cfg: TrainConfig, out_dir=None,
          embedder=None, resume: bool = True) -> Trainer:
    """Run a full training job and return the finished trainer."""
    trainer = Trainer(model_cfg, train_cfg, bundle, out_dir=out_dir, embedder=embedder)
    for row in trainer.run(resume=resume):
        log.info("step %d d_loss %.4f g_loss %.4f penalty %.4f fid %s",
                 row.step, row.d_loss, row.g_loss, row.penalty, row.fid)
    return trainer

