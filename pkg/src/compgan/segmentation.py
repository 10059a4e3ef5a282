"""Instance segmentation by inverting a structured generator.

Generated images are labeled from their component outputs, a segmenter is
trained on those pairs with a permutation-matched cross-entropy, and the
result is scored with the adjusted Rand index on real scenes.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .composition import INTENSITY_THRESHOLD, intensity
from .datasets import DatasetBundle, SceneSpec, assemble_bundle, sample_batch
from .models import GeneratorOutput, StructuredGenerator, sample_latents

log = logging.getLogger(__name__)

MAX_MATCH_K = 6
LABEL_MODES = ("threshold", "alpha_weights")


class UnsupportedError(ValueError):
    pass


# -- labels ----------------------------------------------------------------------

def extract_labels(output: GeneratorOutput, mode: str, threshold: float = INTENSITY_THRESHOLD):
    """Pixel labels ``(B, H, W)`` plus an ignore mask from component outputs.

    ``threshold``: the brightest component above ``threshold`` wins; pixels
    where several components pass the threshold are flagged in the ignore
    mask. ``alpha_weights``: argmax over the composite layer weights, with the
    background layer mapped to label 0.
    """
    if mode == "threshold":
        inten = intensity(output.colors)  # (B, K, H, W)
        above = inten > threshold
        masked = torch.where(above, inten, torch.full_like(inten, -1.0))
        labels = masked.argmax(dim=1) + 1
        labels[~above.any(dim=1)] = 0
        ignore = above.sum(dim=1) >= 2
        return labels, ignore
    if mode == "alpha_weights":
        if output.alphas is None:
            raise ValueError("alpha_weights labels need alpha composited components")
        weights = output.composite.layer_weights  # background last
        k = weights.shape[1] - 1
        idx = weights.argmax(dim=1)
        labels = torch.where(idx == k, torch.zeros_like(idx), idx + 1)
        return labels, torch.zeros_like(labels, dtype=torch.bool)
    raise ValueError(f"unknown label mode {mode!r}; expected one of {LABEL_MODES}")


def default_label_mode(compose_mode: str) -> str:
    return "threshold" if compose_mode == "sum_clip" else "alpha_weights"


# -- permutation-matched loss ---------------------------------------------------------

@dataclass
class MatchResult:
    loss: torch.Tensor
    permutations: list  # per sample: channel used for label j at position j (label 0 -> channel 0)
    sample_losses: torch.Tensor = field(repr=False, default=None)

    @property
    def permutation(self) -> tuple:
        return self.permutations[0]


def permutation_matched_loss(logits: torch.Tensor, target: torch.Tensor,
                             ignore: Optional[torch.Tensor] = None) -> MatchResult:
    """Cross-entropy under the best assignment of object channels to labels.

    The background channel 0 stays fixed; all ``K!`` orderings of channels
    ``1..K`` are scored per sample and only the winning one carries gradient.
    The loss is the mean over non-ignored pixels of the whole batch.
    """
    if logits.dim() == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
        ignore = None if ignore is None else ignore.unsqueeze(0)
    b, c = logits.shape[:2]
    k = c - 1
    if k > MAX_MATCH_K:
        raise UnsupportedError(f"permutation matching enumerates K! orderings; K={k} exceeds {MAX_MATCH_K}")
    if target.shape != (b, *logits.shape[2:]):
        raise ValueError(f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    if int(target.max()) > k or int(target.min()) < 0:
        raise ValueError(f"target labels must lie in 0..{k}")
    logp = F.log_softmax(logits, dim=1).flatten(2)  # (B, C, P)
    onehot = F.one_hot(target.flatten(1), c).permute(0, 2, 1).to(logp.dtype)  # (B, C, P)
    if ignore is not None:
        onehot = onehot * (~ignore.flatten(1)).unsqueeze(1).to(logp.dtype)
    # cost[b, j, ch] = summed NLL of label-j pixels scored by channel ch
    cost = -torch.einsum("bjp,bcp->bjc", onehot, logp)
    perms = [(0,) + p for p in itertools.permutations(range(1, c))]
    index = torch.tensor(perms, device=logits.device)  # (P, C)
    labels = torch.arange(c, device=logits.device)
    totals = cost[:, labels.unsqueeze(0), index].sum(dim=-1)  # (B, P)
    best = totals.detach().argmin(dim=1)
    chosen = totals.gather(1, best.unsqueeze(1)).squeeze(1)
    n_valid = onehot.sum(dim=(1, 2))
    loss = chosen.sum() / n_valid.sum().clamp_min(1)
    return MatchResult(loss, [perms[i] for i in best.tolist()], chosen / n_valid.clamp_min(1))


# -- segmenter -------------------------------------------------------------------------

def _conv_block(cin, cout, stride):
    k = 4 if stride == 2 else 3
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, 1), nn.BatchNorm2d(cout), nn.ReLU(True))


def _up_block(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.ReLU(True))


class Segmenter(nn.Module):
    """Encoder-decoder with skip connections; four stride-2 stages each way."""

    def __init__(self, n_classes: int, widths=(32, 64, 128, 256)):
        super().__init__()
        self.n_classes = n_classes
        self.widths = tuple(widths)
        stem = widths[0] // 2
        self.stem = _conv_block(3, stem, 1)
        chans = [stem] + list(widths)
        self.down = nn.ModuleList(_conv_block(chans[i], chans[i + 1], 2) for i in range(4))
        self.up = nn.ModuleList()
        cin = chans[4]
        for i in reversed(range(4)):
            self.up.append(_up_block(cin, chans[i]))
            cin = 2 * chans[i]
        self.head = nn.Conv2d(cin, n_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ValueError("segmenter input size must be divisible by 16")
        skips = [self.stem(x)]
        for d in self.down:
            skips.append(d(skips[-1]))
        h = skips.pop()
        for u in self.up:
            h = torch.cat([u(h), skips.pop()], dim=1)
        return self.head(h)


PairSource = Callable[[int, torch.Generator], tuple]


def generator_pairs(generator: StructuredGenerator, mode: Optional[str] = None) -> PairSource:
    """Fresh (image, labels, ignore) batches sampled from a frozen generator."""
    if generator.cfg.k > MAX_MATCH_K:
        raise UnsupportedError(f"segmenter training supports K <= {MAX_MATCH_K}, checkpoint has K={generator.cfg.k}")
    mode = mode or default_label_mode(generator.cfg.compose_mode)
    if mode == "alpha_weights" and generator.cfg.compose_mode == "sum_clip":
        raise ValueError("a sum-composed generator has no alpha masks; use threshold labels")
    generator.eval()

    @torch.no_grad()
    def sample(n: int, g: torch.Generator):
        out = generator(sample_latents(generator.cfg, n, generator=g))
        labels, ignore = extract_labels(out, mode)
        return out.image, labels, ignore

    return sample


def bundle_pairs(bundle: DatasetBundle, split: str = "train", seed: int = 0) -> PairSource:
    """Ground-truth (image, labels, ignore) batches from a labeled dataset."""
    if bundle.labels is None:
        raise ValueError("bundle has no labels")
    rng = np.random.default_rng([seed, 3])

    def sample(n: int, g: torch.Generator):
        batch = sample_batch(bundle, split, n, rng)
        return batch.tensor(), torch.from_numpy(batch.labels), torch.from_numpy(batch.overlap)

    return sample


@dataclass
class SegmenterTrainConfig:
    steps: int = 20_000
    batch_size: int = 32
    lr: float = 1e-3
    widths: tuple = (32, 64, 128, 256)
    seed: int = 0


def train_segmenter(source: PairSource, k: int, cfg: SegmenterTrainConfig, log_every: int = 0):
    """Fit a segmenter with ``k + 1`` output channels. Returns ``(segmenter, losses)``."""
    if k > MAX_MATCH_K:
        raise UnsupportedError(f"K={k} exceeds {MAX_MATCH_K}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = Segmenter(k + 1, cfg.widths)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    losses = []
    model.train()
    for step in range(cfg.steps):
        images, labels, ignore = source(cfg.batch_size, g)
        result = permutation_matched_loss(model(images), labels, ignore)
        opt.zero_grad(set_to_none=True)
        result.loss.backward()
        opt.step()
        losses.append(result.loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("segmenter step %d: loss %.4f", step + 1, np.mean(losses[-log_every:]))
    return model.eval(), losses


@torch.no_grad()
def predict(segmenter: Segmenter, images: torch.Tensor) -> torch.Tensor:
    segmenter.eval()
    return segmenter(images).argmax(dim=1)


# -- ARI ---------------------------------------------------------------------------------

def _pairs(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def ari_score(predicted, truth, eval_mask=None) -> float:
    """Adjusted Rand index between two label maps over ``eval_mask`` pixels."""
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {truth.shape}")
    mask = np.ones(truth.shape, bool) if eval_mask is None else np.asarray(eval_mask, bool)
    p, t = predicted[mask].astype(np.int64), truth[mask].astype(np.int64)
    n = p.size
    if n == 0:
        raise ValueError("evaluation mask selects no pixels; ARI is undefined")
    _, p_idx = np.unique(p, return_inverse=True)
    _, t_idx = np.unique(t, return_inverse=True)
    table = np.zeros((p_idx.max() + 1, t_idx.max() + 1))
    np.add.at(table, (p_idx, t_idx), 1)
    index = _pairs(table).sum()
    a = _pairs(table.sum(axis=1)).sum()
    b = _pairs(table.sum(axis=0)).sum()
    expected = a * b / _pairs(np.float64(n)) if n > 1 else 0.0
    denom = (a + b) / 2.0 - expected
    if denom == 0:
        return 1.0
    return float((index - expected) / denom)


def digit_eval_mask(truth: np.ndarray, overlap: Optional[np.ndarray] = None) -> np.ndarray:
    """Ground-truth object pixels, minus ambiguous overlaps when given."""
    mask = np.asarray(truth) > 0
    if overlap is not None:
        mask &= ~np.asarray(overlap, bool)
    return mask


@dataclass
class SegmentationReport:
    indices: list
    scores: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))

    def to_text(self) -> str:
        lines = [f"{i:07d}\t{s:.6f}" for i, s in zip(self.indices, self.scores)]
        lines.append(f"mean\t{self.mean:.6f}")
        lines.append(f"std\t{self.std:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_segmenter(segmenter: Segmenter, bundle: DatasetBundle, split: str = "test",
                       ignore_overlap: bool = True, batch_size: int = 64,
                       limit: Optional[int] = None) -> SegmentationReport:
    """Per-image ARI on real scenes, restricted to (non-overlapping) object pixels."""
    if bundle.labels is None:
        raise ValueError("bundle has no ground-truth labels")
    idx = bundle.split_indices(split)
    if limit is not None:
        idx = idx[:limit]
    indices, scores = [], []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        images = torch.from_numpy(bundle.images[chunk]).permute(0, 3, 1, 2).float() / 255.0
        pred = predict(segmenter, images).numpy()
        for j, i in enumerate(chunk):
            overlap = bundle.overlap[i] if ignore_overlap and bundle.overlap is not None else None
            mask = digit_eval_mask(bundle.labels[i], overlap)
            if not mask.any():
                continue
            indices.append(int(i))
            scores.append(ari_score(pred[j], bundle.labels[i], mask))
    return SegmentationReport(indices, scores)


def generated_bundle(generator: StructuredGenerator, count: int, spec: SceneSpec, seed: int = 0,
                     mode: Optional[str] = None, batch_size: int = 100) -> DatasetBundle:
    """Materialize generated (image, label) pairs in the dataset format."""
    source = generator_pairs(generator, mode)
    g = torch.Generator().manual_seed(seed)
    images, labels, overlap = [], [], []
    for start in range(0, count, batch_size):
        img, lab, ign = source(min(batch_size, count - start), g)
        images.extend(np.uint8(np.clip(np.round(img.permute(0, 2, 3, 1).numpy() * 255), 0, 255)))
        labels.extend(lab.numpy().astype(np.uint8))
        overlap.extend(ign.numpy())
    h, w = spec.canvas
    return assemble_bundle(spec, images, labels, overlap, [[] for _ in images], f"generated-{seed}", h, w)

