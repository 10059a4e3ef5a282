"""Structured generator, discriminator and spectral normalization.

The object generator is a single DCGAN-style decoder applied to every
object latent (weights are shared by construction). An optional background
decoder has its own weights and produces an opaque layer.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from .composition import (
    INTENSITY_THRESHOLD,
    CompositeResult,
    alpha_composite,
    compose_sum,
    intensity,
)
from .relational import RelationalConfig, RelationalStage

COMPOSE_MODES = ("sum_clip", "threshold_alpha", "learned_alpha")
DISC_NORMS = ("auto", "batch", "layer", "none")
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    k: int = 3
    image_size: int = 64
    compose_mode: str = "sum_clip"
    relational: RelationalConfig = field(default_factory=RelationalConfig)
    use_background: bool = False
    latent_dim: int = 64
    gen_channels: int = 512  # width of the 4x4 map, halved at every upsampling stage
    disc_channels: int = 64  # width of the first conv, doubled at every stage
    disc_norm: str = "auto"

    def __post_init__(self):
        if isinstance(self.relational, dict):
            object.__setattr__(self, "relational", RelationalConfig(**self.relational))
        problems = self.problems()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.k < 1:
            out.append(f"k must be >= 1, got {self.k}")
        if self.image_size not in (64, 128):
            out.append(f"image_size must be 64 or 128, got {self.image_size}")
        if self.compose_mode not in COMPOSE_MODES:
            out.append(f"compose_mode must be one of {COMPOSE_MODES}, got {self.compose_mode!r}")
        if self.use_background and self.compose_mode == "sum_clip":
            out.append("a background generator requires an alpha compose mode")
        if self.disc_norm not in DISC_NORMS:
            out.append(f"disc_norm must be one of {DISC_NORMS}, got {self.disc_norm!r}")
        if self.image_size in (64, 128):
            stages = upsampling_stages(self.image_size)
            if self.gen_channels % 2 ** (stages - 1) or self.gen_channels < 2 ** (stages - 1):
                out.append(f"gen_channels must be a multiple of {2 ** (stages - 1)}")
        if self.disc_channels < 1:
            out.append("disc_channels must be positive")
        return out

    @property
    def tag(self) -> str:
        """Run label in the k-GAN notation, e.g. ``3-GAN rel. bg.``."""
        if self.k == 1 and not self.relational.enabled and not self.use_background:
            return "GAN"
        tag = f"{self.k}-GAN " + ("rel." if self.relational.enabled else "ind.")
        return tag + (" bg." if self.use_background else "")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "relational" in d and isinstance(d["relational"], dict):
            d["relational"] = RelationalConfig(**d["relational"])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def upsampling_stages(image_size: int) -> int:
    return int(round(math.log2(image_size // 4)))


# -- latents -----------------------------------------------------------------

@dataclass
class LatentSet:
    objects: torch.Tensor  # (B, K, D)
    background: Optional[torch.Tensor] = None  # (B, D)

    def replace_component(self, index: int, value: torch.Tensor) -> "LatentSet":
        """Copy with component ``index`` (``K`` meaning background) replaced."""
        k = self.objects.shape[1]
        if index == k:
            if self.background is None:
                raise IndexError("latent set has no background latent")
            return LatentSet(self.objects, value)
        if not 0 <= index < k:
            raise IndexError(f"component index {index} out of range for K={k}")
        objects = self.objects.clone()
        objects[:, index] = value
        return LatentSet(objects, self.background)


def sample_latents(cfg: ModelConfig, batch_size: int, generator: Optional[torch.Generator] = None,
                   device=None) -> LatentSet:
    """Draw iid UNIFORM(-1, 1) object latents (and a background latent if used)."""
    shape = (batch_size, cfg.k, cfg.latent_dim)
    objects = torch.rand(shape, generator=generator, device=device) * 2 - 1
    background = None
    if cfg.use_background:
        background = torch.rand((batch_size, cfg.latent_dim), generator=generator, device=device) * 2 - 1
    return LatentSet(objects, background)


# -- spectral normalization ----------------------------------------------------

@dataclass
class SpectralNormState:
    u: torch.Tensor
    n_iter: int = 0


def _l2normalize(x: torch.Tensor, eps: float = SIGMA_FLOOR) -> torch.Tensor:
    return x / x.norm().clamp_min(eps)


def spectral_normalize(weight: torch.Tensor, state: SpectralNormState, n_power_iterations: int = 1):
    """Run power iteration on ``weight`` (reshaped to 2-D) and divide by sigma.

    Returns ``(normalized_weight, new_state, sigma)``. A zero matrix yields
    zeros and leaves ``u`` unchanged.
    """
    w = weight.reshape(weight.shape[0], -1)
    u = state.u
    with torch.no_grad():
        for _ in range(n_power_iterations):
            v = w.t() @ u
            if v.norm() < SIGMA_FLOOR:
                break
            v = _l2normalize(v)
            u_next = w @ v
            if u_next.norm() < SIGMA_FLOOR:
                break
            u = _l2normalize(u_next)
        v = _l2normalize(w.t() @ u)
    sigma = torch.dot(u, w @ v).clamp_min(SIGMA_FLOOR)
    new_state = SpectralNormState(u=u, n_iter=state.n_iter + n_power_iterations)
    return weight / sigma, new_state, sigma


class SpectralNorm(nn.Module):
    """Parametrization dividing a weight by its power-iteration sigma.

    ``u`` is refined by one step per forward pass in training mode only.
    """

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 1):
        super().__init__()
        self.n_power_iterations = n_power_iterations
        u = torch.randn(weight.shape[0], generator=torch.Generator().manual_seed(0), dtype=weight.dtype)
        self.register_buffer("u", _l2normalize(u))
        self.register_buffer("n_iter", torch.zeros((), dtype=torch.long))

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        steps = self.n_power_iterations if self.training else 0
        w_sn, state, _ = spectral_normalize(weight, SpectralNormState(self.u, int(self.n_iter)), steps)
        if steps:
            with torch.no_grad():
                self.u.copy_(state.u)
                self.n_iter += steps
        return w_sn


def apply_spectral_norm(module: nn.Module, n_power_iterations: int = 1) -> nn.Module:
    # unsafe skips the registration-time forward, which would advance u
    parametrize.register_parametrization(module, "weight", SpectralNorm(module.weight, n_power_iterations),
                                         unsafe=True)
    return module


def power_iterate(module: nn.Module, steps: int):
    """Refine the spectral-norm estimate of every parametrized layer in place."""
    for m in module.modules():
        if parametrize.is_parametrized(m, "weight"):
            sn = m.parametrizations.weight[0]
            w = m.parametrizations.weight.original
            with torch.no_grad():
                _, state, _ = spectral_normalize(w, SpectralNormState(sn.u, int(sn.n_iter)), steps)
                sn.u.copy_(state.u)
                sn.n_iter += steps


# -- generator -----------------------------------------------------------------

class DCGANDecoder(nn.Module):
    """Latent vector -> ``out_channels`` image in [0, 1] (sigmoid head)."""

    def __init__(self, latent_dim: int, out_channels: int, image_size: int, base_channels: int):
        super().__init__()
        stages = upsampling_stages(image_size)
        self.base_channels = base_channels
        self.project = nn.Linear(latent_dim, base_channels * 16)
        self.project_norm = nn.BatchNorm2d(base_channels)
        layers = []
        ch = base_channels
        for _ in range(stages - 1):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False), nn.BatchNorm2d(ch // 2), nn.ReLU(True)]
            ch //= 2
        layers.append(nn.ConvTranspose2d(ch, out_channels, 4, 2, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.project(z).view(-1, self.base_channels, 4, 4)
        h = F.relu(self.project_norm(h))
        return torch.sigmoid(self.body(h))


@dataclass
class GeneratorOutput:
    composite: CompositeResult
    colors: torch.Tensor  # (B, K, 3, H, W)
    alphas: Optional[torch.Tensor]  # (B, K, 1, H, W) or None in sum mode
    background: Optional[torch.Tensor]  # (B, 3, H, W)

    @property
    def image(self) -> torch.Tensor:
        return self.composite.image


class StructuredGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        out_ch = 4 if cfg.compose_mode == "learned_alpha" else 3
        self.object_generator = DCGANDecoder(cfg.latent_dim, out_ch, cfg.image_size, cfg.gen_channels)
        self.background_generator = None
        if cfg.use_background:
            self.background_generator = DCGANDecoder(cfg.latent_dim, 3, cfg.image_size, cfg.gen_channels)
        self.relational = RelationalStage(cfg.relational, cfg.latent_dim)

    def _check(self, latents: LatentSet):
        objects = latents.objects
        if objects.dim() != 3 or objects.shape[1:] != (self.cfg.k, self.cfg.latent_dim):
            raise ValueError(f"object latents must be (B, {self.cfg.k}, {self.cfg.latent_dim}), "
                             f"got {tuple(objects.shape)}")
        if self.cfg.use_background and latents.background is None:
            raise ValueError("model uses a background generator but no background latent was given")

    def forward(self, latents: LatentSet) -> GeneratorOutput:
        self._check(latents)
        cfg = self.cfg
        objects, bg_latent = self.relational(latents.objects, latents.background)
        b, k, d = objects.shape
        out = self.object_generator(objects.reshape(b * k, d))
        out = out.view(b, k, *out.shape[1:])
        colors = out[:, :, :3]
        background = None
        if self.background_generator is not None:
            background = self.background_generator(bg_latent)

        if cfg.compose_mode == "sum_clip":
            return GeneratorOutput(compose_sum(colors), colors, None, None)
        if cfg.compose_mode == "learned_alpha":
            alphas = out[:, :, 3:4]
        else:
            # hard threshold; no gradient through the comparison
            alphas = (intensity(colors) > INTENSITY_THRESHOLD).to(colors.dtype).unsqueeze(2).detach()
        bg = background if background is not None else torch.zeros_like(colors[:, 0])
        return GeneratorOutput(alpha_composite(colors, alphas, bg), colors, alphas, background)


# -- discriminator ---------------------------------------------------------------

class Discriminator(nn.Module):
    """DCGAN critic returning one unconstrained score per image."""

    def __init__(self, cfg: ModelConfig, spectral_norm: bool = False):
        super().__init__()
        self.image_size = cfg.image_size
        norm = cfg.disc_norm
        if norm == "auto":
            norm = "none" if spectral_norm else "batch"
        self.norm_kind = norm
        stages = upsampling_stages(cfg.image_size)
        layers = []
        in_ch, ch = 3, cfg.disc_channels
        for i in range(stages):
            conv = nn.Conv2d(in_ch, ch, 4, 2, 1)
            if spectral_norm:
                apply_spectral_norm(conv)
            layers.append(conv)
            if i > 0 and norm == "batch":
                layers.append(nn.BatchNorm2d(ch))
            elif i > 0 and norm == "layer":
                layers.append(nn.GroupNorm(1, ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            in_ch, ch = ch, ch * 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch * 16, 1)
        if spectral_norm:
            apply_spectral_norm(self.head)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1:] != (3, self.image_size, self.image_size):
            raise ValueError(f"expected images of shape (B, 3, {self.image_size}, {self.image_size}), "
                             f"got {tuple(images.shape)}")
        return self.head(self.features(images).flatten(1)).squeeze(1)


def effective_weights(module: nn.Module) -> list[torch.Tensor]:
    """Weights as used in the forward pass (normalized ones for SN layers)."""
    was_training = module.training
    module.eval()  # reading an SN weight in train mode would advance the power iteration
    try:
        return [m.weight.detach() for m in module.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    finally:
        module.train(was_training)


def count_parameters(module: Optional[nn.Module]) -> int:
    return 0 if module is None else sum(p.numel() for p in module.parameters())
