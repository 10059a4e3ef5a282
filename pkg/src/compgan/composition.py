"""Image composition operators.

Component tensors use a leading component axis after the batch axis:
colors are ``(B, K, 3, H, W)``, alphas ``(B, K, 1, H, W)`` (or
``(B, K, H, W)``), and the background is ``(B, 3, H, W)``. Component index
0 is the front-most layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

# Intensity above which a component pixel counts as "drawn". Shared by
# threshold alphas, sum-mode contribution masks and label extraction.
INTENSITY_THRESHOLD = 0.1


@dataclass
class CompositeResult:
    image: torch.Tensor  # (B, 3, H, W)
    layer_weights: torch.Tensor  # (B, K + 1, H, W), background last


def _squeeze_alpha(alphas: torch.Tensor) -> torch.Tensor:
    if alphas.dim() == 5:
        if alphas.shape[2] != 1:
            raise ValueError(f"alpha must have a single channel, got {tuple(alphas.shape)}")
        alphas = alphas[:, :, 0]
    if alphas.dim() != 4:
        raise ValueError(f"alphas must be (B, K, H, W), got {tuple(alphas.shape)}")
    return alphas


def intensity(colors: torch.Tensor) -> torch.Tensor:
    """Per-pixel intensity of component colors: max over the channel axis."""
    return colors.amax(dim=-3)


def contribution_masks(colors: torch.Tensor, threshold: float = INTENSITY_THRESHOLD) -> torch.Tensor:
    """Boolean ``(B, K, H, W)`` mask of pixels each component draws on."""
    return intensity(colors) > threshold


def compose_sum(colors: torch.Tensor) -> CompositeResult:
    """Sum component colors and clip to [0, 1].

    ``layer_weights`` holds the contribution masks of each component (as
    floats), with a final background row marking pixels no component
    contributes to. They are not a partition of unity where components
    overlap.
    """
    if colors.dim() != 5 or colors.shape[1] < 1:
        raise ValueError(f"colors must be (B, K, C, H, W) with K >= 1, got {tuple(colors.shape)}")
    image = colors.sum(dim=1).clamp(0.0, 1.0)
    masks = contribution_masks(colors).to(colors.dtype)
    bg = (masks.sum(dim=1, keepdim=True) == 0).to(colors.dtype)
    return CompositeResult(image=image, layer_weights=torch.cat([masks, bg], dim=1))


def composite_weights(alphas: torch.Tensor) -> torch.Tensor:
    """Per-layer weights ``alpha_i * prod_{j<i}(1 - alpha_j)``, background last.

    Returns ``(B, K + 1, H, W)``; the weights sum to one at every pixel.
    """
    alphas = _squeeze_alpha(alphas)
    transmit = 1.0 - alphas
    # exclusive cumulative product: transmittance in front of each layer
    ones = torch.ones_like(alphas[:, :1])
    in_front = torch.cumprod(torch.cat([ones, transmit], dim=1), dim=1)
    weights = alphas * in_front[:, :-1]
    return torch.cat([weights, in_front[:, -1:]], dim=1)


def alpha_composite(
    colors: torch.Tensor,
    alphas: Optional[torch.Tensor],
    background: torch.Tensor,
) -> CompositeResult:
    """Front-to-back alpha compositing of K layers over an opaque background."""
    if alphas is None:
        raise ValueError("alpha compositing requires an alpha map for every object component")
    alphas = _squeeze_alpha(alphas)
    if colors.dim() != 5:
        raise ValueError(f"colors must be (B, K, C, H, W), got {tuple(colors.shape)}")
    b, k, c, h, w = colors.shape
    if alphas.shape != (b, k, h, w):
        raise ValueError(f"alpha shape {tuple(alphas.shape)} does not match colors {tuple(colors.shape)}")
    if background.shape != (b, c, h, w):
        raise ValueError(f"background shape {tuple(background.shape)} does not match colors {tuple(colors.shape)}")
    weights = composite_weights(alphas)
    layers = torch.cat([colors, background.unsqueeze(1)], dim=1)
    image = (layers * weights.unsqueeze(2)).sum(dim=1)
    return CompositeResult(image=image, layer_weights=weights)


def layers_over_white(colors: torch.Tensor, alphas: Optional[torch.Tensor]) -> torch.Tensor:
    """Render each layer over white, so zero alpha shows as white."""
    if alphas is None:
        return colors
    a = _squeeze_alpha(alphas).unsqueeze(2)
    return colors * a + (1.0 - a)
