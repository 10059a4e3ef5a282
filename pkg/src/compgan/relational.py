"""Relational stage: self-attention blocks that update object latents.

Each head projects latents to queries, keys and values (one fully
connected layer, ReLU, LayerNorm each), attends with scaled dot products and
maps the result back to latent size with a two-layer MLP. A block combines
its heads, adds the residual and normalizes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

KEY_DIM = 32
UPDATE_HIDDEN = 64
LAYER_NORM_EPS = 1e-5
UPDATE_INIT_SCALE = 0.1


@dataclass(frozen=True)
class RelationalConfig:
    n_blocks: int = 0
    n_heads: int = 1
    share_across_blocks: bool = False
    include_background: bool = False

    def __post_init__(self):
        if not 0 <= self.n_blocks <= 2:
            raise ValueError(f"n_blocks must be in 0..2, got {self.n_blocks}")
        if not 1 <= self.n_heads <= 2:
            raise ValueError(f"n_heads must be in 1..2, got {self.n_heads}")

    @property
    def enabled(self) -> bool:
        return self.n_blocks > 0


def dot_product_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """Scaled dot-product attention over the second-to-last axis.

    Returns ``(softmax(q k^T / sqrt(d)) v, weights)`` with ``d`` the key width.
    """
    d = k.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d)
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    weights = logits.exp()
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights @ v, weights


def _projection(in_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, out_dim), nn.ReLU(), nn.LayerNorm(out_dim, eps=LAYER_NORM_EPS))


class AttentionHead(nn.Module):
    def __init__(self, latent_dim: int = 64, key_dim: int = KEY_DIM, hidden_dim: int = UPDATE_HIDDEN):
        super().__init__()
        self.query = _projection(latent_dim, key_dim)
        self.key = _projection(latent_dim, key_dim)
        self.value = _projection(latent_dim, key_dim)
        self.update = nn.Sequential(
            nn.Linear(key_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, latent_dim), nn.ReLU(),
        )
        with torch.no_grad():
            self.update[2].weight.mul_(UPDATE_INIT_SCALE)
            self.update[2].bias.mul_(UPDATE_INIT_SCALE)

    def attend(self, z: torch.Tensor):
        """Return ``(a, weights)``: attended values and the attention matrix."""
        if not torch.isfinite(z).all():
            raise ValueError("latents contain non-finite values")
        return dot_product_attention(self.query(z), self.key(z), self.value(z))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        a, _ = self.attend(z)
        return self.update(a)


class AttentionBlock(nn.Module):
    """One residual attention block over ``(..., N, latent_dim)`` latents."""

    def __init__(self, latent_dim: int = 64, n_heads: int = 1,
                 key_dim: int = KEY_DIM, hidden_dim: int = UPDATE_HIDDEN):
        super().__init__()
        if n_heads < 1:
            raise ValueError("an attention block needs at least one head")
        self.heads = nn.ModuleList(AttentionHead(latent_dim, key_dim, hidden_dim) for _ in range(n_heads))
        self.combine = None
        if n_heads > 1:
            self.combine = _projection(n_heads * latent_dim, latent_dim)
        self.norm = nn.LayerNorm(latent_dim, eps=LAYER_NORM_EPS)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        updates = [head(z) for head in self.heads]
        if self.combine is None:
            u = updates[0]
        else:
            u = self.combine(torch.cat(updates, dim=-1))
        return self.norm(u + z)


class RelationalStage(nn.Module):
    """Apply ``cfg.n_blocks`` attention blocks to the object latents.

    When ``cfg.include_background`` is set the background latent is appended
    as an extra row and updated along with the objects; otherwise it passes
    through untouched.
    """

    def __init__(self, cfg: RelationalConfig, latent_dim: int = 64):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = latent_dim
        n_unique = 1 if (cfg.share_across_blocks and cfg.n_blocks > 0) else cfg.n_blocks
        self.blocks = nn.ModuleList(AttentionBlock(latent_dim, cfg.n_heads) for _ in range(n_unique))

    def block_sequence(self):
        if self.cfg.n_blocks == 0:
            return []
        if self.cfg.share_across_blocks:
            return [self.blocks[0]] * self.cfg.n_blocks
        return list(self.blocks)

    def forward(self, latents: torch.Tensor, background: Optional[torch.Tensor] = None):
        if latents.shape[-1] != self.latent_dim:
            raise ValueError(f"expected latent dim {self.latent_dim}, got {latents.shape[-1]}")
        if self.cfg.n_blocks == 0:
            return latents, background
        joint = self.cfg.include_background and background is not None
        if self.cfg.include_background and background is None:
            raise ValueError("relational config includes the background latent but none was given")
        z = torch.cat([latents, background.unsqueeze(-2)], dim=-2) if joint else latents
        for block in self.block_sequence():
            z = block(z)
        if joint:
            return z[..., :-1, :], z[..., -1, :]
        return z, background

