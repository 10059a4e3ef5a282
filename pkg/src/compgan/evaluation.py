"""FID with a pluggable embedder, latent traversals and component dumps."""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .composition import layers_over_white
from .datasets import DatasetBundle
from .models import LatentSet, StructuredGenerator, sample_latents

log = logging.getLogger(__name__)


class IllConditionedWarning(UserWarning):
    pass


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def well_conditioned(self) -> bool:
        return self.n >= self.mean.shape[0]


def gaussian_stats(features: np.ndarray) -> EmbeddingStats:
    """Sample mean and unbiased covariance of ``(N, D)`` features."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (N, D), got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError("at least two samples are needed for a covariance estimate")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2
    if n < d:
        warnings.warn(f"{n} samples for {d}-dimensional features; covariance is rank deficient",
                      IllConditionedWarning, stacklevel=2)
    return EmbeddingStats(mean, cov, n)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """Frechet distance between the Gaussians fitted to two feature sets.

    ``Tr((S_a S_b)^{1/2})`` is evaluated as the trace of the square root of the
    symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``, clamping negative eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        if not (np.isfinite(s.mean).all() and np.isfinite(s.cov).all()):
            raise ValueError("statistics contain non-finite values")
    diff = a.mean - b.mean
    root_a = _sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d, 0.0)


# -- embedders -----------------------------------------------------------------

class Embedder(Protocol):
    dim: int

    def embed(self, images: torch.Tensor) -> np.ndarray:
        """Map ``(B, 3, H, W)`` images in [0, 1] to ``(B, dim)`` features."""


class ConvEmbedder(nn.Module):
    """Small fully-convolutional classifier; features are the pooled trunk output.

    Trained on single-object crops, then applied to whole scenes.
    """

    def __init__(self, dim: int = 64, n_classes: int = 10, width: int = 32):
        super().__init__()
        self.dim = dim
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * width, dim, 3, 2, 1), nn.ReLU(),
        )
        self.classifier = nn.Linear(dim, n_classes)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.trunk(images).mean(dim=(2, 3))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(images))

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            return self.features(images.float()).double().numpy()
        finally:
            self.train(was_training)

    @classmethod
    def untrained(cls, seed: int = 0, **kw) -> "ConvEmbedder":
        """Randomly initialized embedder for data without object annotations."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(**kw)


class TorchScriptEmbedder:
    """External embedder loaded from a TorchScript file (e.g. an Inception export)."""

    def __init__(self, path, input_size: int = 299, batch_size: int = 100):
        self.model = torch.jit.load(str(path), map_location="cpu").eval()
        self.input_size = input_size
        self.batch_size = batch_size
        with torch.no_grad():
            probe = self.model(torch.zeros(1, 3, input_size, input_size))
        self.dim = int(probe.reshape(1, -1).shape[1])

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> np.ndarray:
        x = F.interpolate(images.float(), size=(self.input_size, self.input_size), mode="bilinear",
                          align_corners=False)
        return self.model(x).reshape(len(x), -1).double().numpy()


def object_crops(bundle: DatasetBundle, indices: Sequence[int], size: int = 32):
    """Square crops around each annotated object, resized to ``size``."""
    crops, classes = [], []
    h, w = bundle.spec.canvas
    for i in indices:
        for m in bundle.meta[i]:
            y0, x0, y1, x1 = m.bbox
            side = max(y1 - y0, x1 - x0)
            cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
            top = int(np.clip(cy - side // 2, 0, h - side))
            left = int(np.clip(cx - side // 2, 0, w - side))
            patch = Image.fromarray(bundle.images[i][top:top + side, left:left + side])
            crops.append(np.asarray(patch.resize((size, size), Image.BILINEAR)))
            classes.append(m.class_id)
    return np.stack(crops), np.asarray(classes)


def train_crop_embedder(bundle: DatasetBundle, steps: int = 2000, batch_size: int = 64,
                        seed: int = 0, dim: int = 64) -> ConvEmbedder:
    """Train the built-in embedder to classify single-object crops of ``bundle``."""
    train_idx = bundle.split_indices("train")
    if bundle.meta is None or not any(bundle.meta[i] for i in train_idx):
        log.warning("bundle has no object annotations; using an untrained embedder")
        return ConvEmbedder.untrained(seed, dim=dim)
    crops, classes = object_crops(bundle, train_idx)
    n_classes = int(classes.max()) + 1
    x = torch.from_numpy(crops).permute(0, 3, 1, 2).float() / 255.0
    y = torch.from_numpy(classes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConvEmbedder(dim=dim, n_classes=n_classes)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        g = torch.Generator().manual_seed(seed)
        for _ in range(steps):
            idx = torch.randint(len(x), (batch_size,), generator=g)
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


# -- FID -------------------------------------------------------------------------

ImageSource = Union[StructuredGenerator, Callable[[int, torch.Generator], torch.Tensor]]


def embed_stream(embedder: Embedder, batches) -> EmbeddingStats:
    feats = [embedder.embed(b) for b in batches]
    return gaussian_stats(np.concatenate(feats))


def _content_order(images: np.ndarray) -> np.ndarray:
    keys = [hashlib.sha1(img.tobytes()).hexdigest() for img in images]
    return np.argsort(keys, kind="stable")


def real_stats(bundle: DatasetBundle, embedder: Embedder, n_samples: int,
               split: str = "holdout", batch_size: int = 250) -> EmbeddingStats:
    """Embedding statistics of up to ``n_samples`` real scenes from ``split``.

    The subset is chosen by image content, so reordering the split leaves the
    result unchanged.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    idx = bundle.split_indices(split)
    images = bundle.images[idx]
    if len(images) < n_samples:
        warnings.warn(f"{split} split has {len(images)} scenes, fewer than n_samples={n_samples}; using all",
                      stacklevel=2)
    else:
        images = images[np.sort(_content_order(images)[:n_samples])]
    batches = (torch.from_numpy(images[i:i + batch_size]).permute(0, 3, 1, 2).float() / 255.0
               for i in range(0, len(images), batch_size))
    return embed_stream(embedder, batches)


@torch.no_grad()
def generated_images(source: ImageSource, n: int, seed: int = 0, batch_size: int = 250):
    """Yield ``n`` generated images in batches, in inference mode."""
    g = torch.Generator().manual_seed(seed)
    if isinstance(source, StructuredGenerator):
        was_training = source.training
        source.eval()
        try:
            for start in range(0, n, batch_size):
                b = min(batch_size, n - start)
                yield source(sample_latents(source.cfg, b, generator=g)).image
        finally:
            source.train(was_training)
    else:
        for start in range(0, n, batch_size):
            yield source(min(batch_size, n - start), g)


def compute_fid(source: ImageSource, bundle: DatasetBundle, embedder: Embedder, n_samples: int,
                seed: int = 0, reference: Optional[EmbeddingStats] = None, batch_size: int = 250) -> float:
    """FID between ``n_samples`` generated images and hold-out scenes."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    ref = reference if reference is not None else real_stats(bundle, embedder, n_samples, batch_size=batch_size)
    fake = embed_stream(embedder, generated_images(source, n_samples, seed, batch_size))
    return frechet_distance(fake, ref)


def bundle_sampler(bundle: DatasetBundle, split: str = "train") -> Callable[[int, torch.Generator], torch.Tensor]:
    """Image source drawing real scenes, used to calibrate FID noise floors."""
    pool = bundle.split_indices(split)

    def sample(n: int, g: torch.Generator) -> torch.Tensor:
        idx = pool[torch.randint(len(pool), (n,), generator=g).numpy()]
        return torch.from_numpy(bundle.images[idx]).permute(0, 3, 1, 2).float() / 255.0

    return sample


# -- traversal and dumps -----------------------------------------------------------

@dataclass
class TraversalSpec:
    component: int
    direction: torch.Tensor
    increments: Sequence[float] = tuple(np.linspace(-1.0, 1.0, 8))

    def __post_init__(self):
        if not np.all(np.isfinite(np.asarray(self.increments, dtype=float))):
            raise ValueError("traversal increments must be finite")
        if float(self.direction.norm()) == 0.0:
            raise ValueError("traversal direction must be nonzero")


def random_direction(dim: int, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(dim, generator=g) * 2 - 1


@torch.no_grad()
def traverse_latent(generator: StructuredGenerator, base: LatentSet, spec: TraversalSpec,
                    return_outputs: bool = False) -> list:
    """Regenerate with ``z_c + t * direction`` for each increment ``t``.

    Component index ``K`` designates the background latent.
    """
    k = generator.cfg.k
    has_bg = base.background is not None
    if not 0 <= spec.component < k + int(has_bg):
        raise IndexError(f"component {spec.component} out of range (K={k}, background={has_bg})")
    current = base.background if spec.component == k else base.objects[:, spec.component]
    was_training = generator.training
    generator.eval()
    try:
        outputs = []
        for t in spec.increments:
            moved = base.replace_component(spec.component, current + float(t) * spec.direction)
            outputs.append(generator(moved))
    finally:
        generator.train(was_training)
    return outputs if return_outputs else [o.image for o in outputs]


def _to_uint8(x: torch.Tensor) -> np.ndarray:
    return np.uint8(np.clip(np.round(x.detach().cpu().numpy() * 255.0), 0, 255))


def image_grid(rows: Sequence[Sequence[torch.Tensor]], pad: int = 2) -> np.ndarray:
    """Tile ``(3, H, W)`` images row by row into an ``(H', W', 3)`` uint8 array."""
    h, w = rows[0][0].shape[-2:]
    ncol = max(len(r) for r in rows)
    grid = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), 255, np.uint8)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            grid[y:y + h, x:x + w] = _to_uint8(img).transpose(1, 2, 0)
    return grid


def save_grid(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_grid(rows)).save(path)
    return path


def dump_components(output, out_dir, prefix: str = "sample") -> list[Path]:
    """Write each component layer as an RGBA PNG plus an over-white overview grid.

    Columns of the overview: object layers, background (if any), composite.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    colors, alphas = output.colors, output.alphas
    over_white = layers_over_white(colors, alphas)
    rows = []
    for b in range(colors.shape[0]):
        row = []
        for k in range(colors.shape[1]):
            rgb = _to_uint8(colors[b, k]).transpose(1, 2, 0)
            if alphas is None:
                a = np.full(rgb.shape[:2], 255, np.uint8)
            else:
                a = _to_uint8(alphas[b, k, 0])
            p = out / f"{prefix}{b:04d}_layer{k}.png"
            Image.fromarray(np.dstack([rgb, a]), mode="RGBA").save(p)
            written.append(p)
            row.append(over_white[b, k])
        if output.background is not None:
            p = out / f"{prefix}{b:04d}_background.png"
            Image.fromarray(_to_uint8(output.background[b]).transpose(1, 2, 0)).save(p)
            written.append(p)
            row.append(output.background[b])
        row.append(output.image[b])
        rows.append(row)
    written.append(save_grid(rows, out / f"{prefix}_overview.png"))
    return written
