"""Multi-object datasets with instance labels.

Multi-MNIST variants place three rescaled digits on a 64x64 canvas. Scenes are
rendered from a per-scene random stream derived from ``(seed, index)``, so a
bundle is a pure function of its spec, its size and the source corpora.

Label maps store the instance id (draw order, starting at 1) in the low bits
and set bit 7 on pixels claimed by more than one additive digit.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import logging
import pickle
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MM_VARIANTS = ("independent_mm", "triplet_mm", "rgb_occluded_mm")
VARIANTS = MM_VARIANTS + ("cifar10_mm", "clevr")
SPLITS = ("train", "holdout", "test")
OVERLAP_BIT = 0x80
MANIFEST_VERSION = "compgan-manifest 1"

DIGIT_BOX = 20  # MNIST digits live in a centered 20x20 box of the 28x28 frame
DIGIT_THRESHOLD = 0.1
CLEVR_RESIZE = (240, 160)  # (width, height)
CLEVR_CROP = 128

COLOR_TAGS = ("red", "green", "blue")


class SourceError(RuntimeError):
    """A source corpus is missing, empty or unreadable."""


class ImageSizeError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    variant: str
    seed: int = 0
    canvas: Optional[tuple] = None
    objects_per_scene: int = 3
    scale_range: tuple = (0.8, 1.2)
    split_fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        expected = (128, 128) if self.variant == "clevr" else (64, 64)
        if self.canvas is None:
            object.__setattr__(self, "canvas", expected)
        object.__setattr__(self, "canvas", tuple(self.canvas))
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))
        if self.canvas != expected:
            raise ValueError(f"{self.variant} uses a {expected} canvas, got {self.canvas}")
        if self.variant != "clevr" and self.objects_per_scene != 3:
            raise ValueError("multi-MNIST scenes hold exactly 3 digits")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError("split_fractions must be three fractions summing to 1")

    def to_text(self) -> str:
        return "".join(f"{k}={json.dumps(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        fields = {}
        for line in text.splitlines():
            if not line.strip() or "=" not in line:
                continue
            k, v = line.split("=", 1)
            if k in cls.__dataclass_fields__:
                fields[k] = json.loads(v)
        return cls(**fields)


@dataclass
class ObjectMeta:
    class_id: int
    color: str
    bbox: tuple  # (y0, x0, y1, x1), exclusive end


@dataclass
class LabeledScene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labels: Optional[np.ndarray]  # (H, W) int, 0 = background
    overlap: Optional[np.ndarray]  # (H, W) bool
    object_meta: list


# -- source corpora -------------------------------------------------------------

def _fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class DigitCorpus:
    images: np.ndarray  # (N, 28, 28) uint8
    labels: np.ndarray  # (N,) int

    def __post_init__(self):
        if len(self.images) == 0:
            raise SourceError("digit corpus is empty")
        if self.images.shape[1:] != (28, 28):
            raise SourceError(f"digit images must be 28x28, got {self.images.shape[1:]}")
        self.images = self.images.astype(np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self._by_class = {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}

    @property
    def fingerprint(self) -> str:
        return _fingerprint(self.images, self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(self._by_class)

    def indices_of(self, class_id: int) -> np.ndarray:
        return self._by_class[class_id]

    @classmethod
    def from_path(cls, path) -> "DigitCorpus":
        """Load MNIST from an ``.npz`` (``x_train``/``y_train``) or a directory of IDX files."""
        path = Path(path)
        if not path.exists():
            raise SourceError(f"digit corpus not found: {path}")
        if path.is_file():
            with np.load(path) as data:
                return cls(data["x_train"], data["y_train"])
        images = _read_idx(_find(path, "train-images-idx3-ubyte"))
        labels = _read_idx(_find(path, "train-labels-idx1-ubyte"))
        return cls(images, labels)

    @classmethod
    def bundled(cls) -> "DigitCorpus":
        """Small offline digit corpus: scikit-learn's 8x8 digits upscaled into MNIST framing."""
        from sklearn.datasets import load_digits

        digits = load_digits()
        out = np.zeros((len(digits.images), 28, 28), dtype=np.uint8)
        off = (28 - DIGIT_BOX) // 2
        for i, img in enumerate(digits.images):
            small = Image.fromarray(np.uint8(np.round(img / 16.0 * 255)))
            big = np.asarray(small.resize((DIGIT_BOX, DIGIT_BOX), Image.BILINEAR))
            out[i, off:off + DIGIT_BOX, off:off + DIGIT_BOX] = big
        return cls(out, digits.target)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise SourceError(f"{stem} not found in {directory}")


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        _, dtype, ndim = struct.unpack(">HBB", f.read(4))
        if dtype != 0x08:
            raise SourceError(f"{path}: only unsigned byte IDX files are supported")
        shape = struct.unpack(">" + "I" * ndim, f.read(4 * ndim))
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(shape)


@dataclass
class BackgroundCorpus:
    images: np.ndarray  # (N, h, w, 3) uint8

    def __post_init__(self):
        if len(self.images) == 0:
            raise SourceError("background corpus is empty")
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise SourceError(f"background images must be (N, h, w, 3), got {self.images.shape}")
        self.images = self.images.astype(np.uint8)

    @property
    def fingerprint(self) -> str:
        return _fingerprint(self.images)

    @classmethod
    def from_path(cls, path) -> "BackgroundCorpus":
        """Load CIFAR10 from an ``.npz`` (``x_train``) or the python-pickle batch directory."""
        path = Path(path)
        if not path.exists():
            raise SourceError(f"background corpus not found: {path}")
        if path.is_file():
            with np.load(path) as data:
                return cls(data["x_train"])
        batches = sorted(path.glob("data_batch_*"))
        if not batches:
            raise SourceError(f"no CIFAR10 data_batch_* files in {path}")
        chunks = []
        for b in batches:
            with open(b, "rb") as f:
                d = pickle.load(f, encoding="bytes")
            chunks.append(d[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        return cls(np.concatenate(chunks))

    @classmethod
    def synthetic(cls, n: int = 512, seed: int = 0) -> "BackgroundCorpus":
        """Smooth random color fields, a stand-in for natural images in tests."""
        rng = np.random.default_rng(seed)
        out = np.empty((n, 32, 32, 3), dtype=np.uint8)
        for i in range(n):
            coarse = np.uint8(rng.integers(0, 256, size=(4, 4, 3)))
            field_ = np.asarray(Image.fromarray(coarse).resize((32, 32), Image.BICUBIC), dtype=np.float64)
            field_ += rng.normal(0, 8, size=field_.shape)
            out[i] = np.clip(np.round(field_), 0, 255)
        return cls(out)


# -- rendering -------------------------------------------------------------------

def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.uint8(np.clip(np.round(x * 255.0), 0, 255))


def render_digit(digit: np.ndarray, scale: float) -> np.ndarray:
    """Crop the 20x20 digit box, rescale, and zero out faint pixels."""
    off = (28 - DIGIT_BOX) // 2
    crop = digit[off:off + DIGIT_BOX, off:off + DIGIT_BOX]
    size = max(1, int(round(DIGIT_BOX * scale)))
    patch = np.asarray(Image.fromarray(crop).resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    patch[patch <= DIGIT_THRESHOLD] = 0.0
    return patch


@dataclass
class _Draw:
    class_id: int
    color: str
    y: int
    x: int
    patch: np.ndarray


def _plan_digits(spec: SceneSpec, corpus: DigitCorpus, rng: np.random.Generator) -> list[_Draw]:
    h, w = spec.canvas
    n = spec.objects_per_scene
    if spec.variant == "triplet_mm":
        cls = corpus.classes[rng.integers(len(corpus.classes))]
        pool = corpus.indices_of(cls)
        picks = pool[rng.integers(len(pool), size=n)]
    else:
        picks = rng.integers(len(corpus.images), size=n)
    if spec.variant in ("rgb_occluded_mm", "cifar10_mm"):
        colors = [COLOR_TAGS[c] for c in rng.permutation(3)]
    else:
        colors = ["white"] * n
    draws = []
    lo, hi = spec.scale_range
    for idx, color in zip(picks, colors):
        patch = render_digit(corpus.images[idx], rng.uniform(lo, hi))
        s = patch.shape[0]
        y = int(rng.integers(0, h - s + 1))
        x = int(rng.integers(0, w - s + 1))
        draws.append(_Draw(int(corpus.labels[idx]), color, y, x, patch))
    return draws


_RGB = {"white": (1.0, 1.0, 1.0), "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}


def render_scene(spec: SceneSpec, draws: Sequence[_Draw], background: Optional[np.ndarray] = None):
    """Rasterize planned digits. Returns ``(image uint8, labels uint8, overlap bool, meta)``."""
    h, w = spec.canvas
    canvas = np.zeros((h, w, 3)) if background is None else background.astype(np.float64) / 255.0
    labels = np.zeros((h, w), dtype=np.uint8)
    coverage = np.zeros((h, w), dtype=np.int64)
    best = np.zeros((h, w))
    additive = spec.variant in ("independent_mm", "triplet_mm")
    meta = []
    for inst, d in enumerate(draws, start=1):
        s = d.patch.shape[0]
        ys, xs = slice(d.y, d.y + s), slice(d.x, d.x + s)
        mask = d.patch > 0
        color = np.asarray(_RGB[d.color])
        if additive:
            canvas[ys, xs] += d.patch[..., None] * color
            region = labels[ys, xs]
            claim = mask & (d.patch > best[ys, xs])
            region[claim] = inst
            best[ys, xs] = np.where(claim, d.patch, best[ys, xs])
        else:
            canvas[ys, xs][mask] = d.patch[mask][:, None] * color
            labels[ys, xs][mask] = inst
        coverage[ys, xs] += mask
        meta.append(ObjectMeta(d.class_id, d.color, (d.y, d.x, d.y + s, d.x + s)))
    overlap = (coverage >= 2) if additive else np.zeros((h, w), dtype=bool)
    return _to_uint8(np.clip(canvas, 0.0, 1.0)), labels, overlap, meta


def _resize_background(img: np.ndarray, canvas: tuple) -> np.ndarray:
    h, w = canvas
    return np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))


# -- bundles -----------------------------------------------------------------------

@dataclass
class DatasetBundle:
    spec: SceneSpec
    images: np.ndarray  # (N, H, W, 3) uint8
    labels: Optional[np.ndarray]  # (N, H, W) uint8
    overlap: Optional[np.ndarray]  # (N, H, W) bool
    meta: list
    splits: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __len__(self):
        return len(self.images)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}")
        return self.splits[split]

    def scene(self, i: int) -> LabeledScene:
        return LabeledScene(
            image=self.images[i].astype(np.float32) / 255.0,
            labels=None if self.labels is None else self.labels[i].astype(np.int64),
            overlap=None if self.overlap is None else self.overlap[i],
            object_meta=self.meta[i],
        )

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        if self.labels is not None:
            (out / "labels").mkdir(exist_ok=True)
        split_of = {int(i): s for s, idx in self.splits.items() for i in idx}
        lines = [MANIFEST_VERSION, f"fingerprint {self.fingerprint}", f"count {len(self)}"]
        for i in range(len(self)):
            name = f"{i:07d}.png"
            Image.fromarray(self.images[i]).save(out / "images" / name)
            if self.labels is not None:
                encoded = self.labels[i] | (self.overlap[i].astype(np.uint8) * OVERLAP_BIT)
                Image.fromarray(encoded, mode="L").save(out / "labels" / name)
            record = [{"class": m.class_id, "color": m.color, "bbox": list(m.bbox)} for m in self.meta[i]]
            lines.append(f"{i:07d}\t{split_of.get(i, 'train')}\t{json.dumps(record)}")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n")
        (out / "spec.txt").write_text(self.spec.to_text() + f"fingerprint={json.dumps(self.fingerprint)}\n")
        return out

    @classmethod
    def load(cls, directory) -> "DatasetBundle":
        d = Path(directory)
        try:
            lines = (d / "manifest.txt").read_text().splitlines()
        except FileNotFoundError as e:
            raise SourceError(f"no manifest.txt in {d}") from e
        if not lines or lines[0] != MANIFEST_VERSION:
            raise SourceError(f"{d}/manifest.txt: unsupported manifest version {lines[:1]}")
        spec = SceneSpec.from_text((d / "spec.txt").read_text())
        fingerprint = lines[1].split(" ", 1)[1]
        records = [ln.split("\t") for ln in lines[3:] if ln.strip()]
        has_labels = (d / "labels").is_dir()
        images, labels, overlap, meta = [], [], [], []
        splits = {s: [] for s in SPLITS}
        for i, (name, split, record) in enumerate(records):
            images.append(np.asarray(Image.open(d / "images" / f"{name}.png").convert("RGB")))
            if has_labels:
                raw = np.asarray(Image.open(d / "labels" / f"{name}.png"))
                labels.append(raw & ~np.uint8(OVERLAP_BIT))
                overlap.append((raw & OVERLAP_BIT) > 0)
            meta.append([ObjectMeta(r["class"], r["color"], tuple(r["bbox"])) for r in json.loads(record)])
            splits.setdefault(split, []).append(i)
        h, w = spec.canvas
        return cls(
            spec=spec,
            images=np.stack(images) if images else np.zeros((0, h, w, 3), np.uint8),
            labels=np.stack(labels) if labels else None,
            overlap=np.stack(overlap) if overlap else None,
            meta=meta,
            splits={s: np.asarray(v, dtype=np.int64) for s, v in splits.items()},
            fingerprint=fingerprint,
        )


def _split_sizes(count: int, fractions: tuple) -> dict:
    holdout = int(count * fractions[1])
    test = int(count * fractions[2])
    return {"train": count - holdout - test, "holdout": holdout, "test": test}


def assemble_bundle(spec, images, labels, overlap, meta, fingerprint, h, w) -> DatasetBundle:
    count = len(images)
    sizes = _split_sizes(count, spec.split_fractions)
    bounds = np.cumsum([0] + [sizes[s] for s in SPLITS])
    splits = {s: np.arange(bounds[i], bounds[i + 1]) for i, s in enumerate(SPLITS)}
    return DatasetBundle(
        spec=spec,
        images=np.stack(images) if count else np.zeros((0, h, w, 3), np.uint8),
        labels=(np.stack(labels) if count else np.zeros((0, h, w), np.uint8)) if labels is not None else None,
        overlap=(np.stack(overlap) if count else np.zeros((0, h, w), bool)) if overlap is not None else None,
        meta=meta,
        splits=splits,
        fingerprint=fingerprint,
    )


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def build_multi_mnist(spec: SceneSpec, count: int, digit_corpus: Optional[DigitCorpus]) -> DatasetBundle:
    if spec.variant not in MM_VARIANTS:
        raise ValueError(f"build_multi_mnist handles {MM_VARIANTS}, got {spec.variant!r}")
    if digit_corpus is None:
        raise SourceError("a digit corpus is required")
    if count <= 0:
        log.warning("requested %d scenes; returning an empty bundle", count)
        count = 0
    images, labels, overlap, meta = [], [], [], []
    for i in range(count):
        rng = scene_rng(spec.seed, i)
        img, lab, ov, m = render_scene(spec, _plan_digits(spec, digit_corpus, rng))
        images.append(img), labels.append(lab), overlap.append(ov), meta.append(m)
    fp = _fingerprint(np.frombuffer((digit_corpus.fingerprint + spec.to_text()).encode(), np.uint8))
    return assemble_bundle(spec, images, labels, overlap, meta, fp, *spec.canvas)


def build_cifar_mm(spec: SceneSpec, count: int, digit_corpus: Optional[DigitCorpus],
                   background_corpus: Optional[BackgroundCorpus]) -> DatasetBundle:
    if spec.variant != "cifar10_mm":
        raise ValueError(f"build_cifar_mm requires variant cifar10_mm, got {spec.variant!r}")
    if digit_corpus is None or background_corpus is None:
        raise SourceError("cifar10_mm needs both a digit corpus and a background corpus")
    if count <= 0:
        log.warning("requested %d scenes; returning an empty bundle", count)
        count = 0
    images, labels, overlap, meta = [], [], [], []
    for i in range(count):
        rng = scene_rng(spec.seed, i)
        bg = background_corpus.images[rng.integers(len(background_corpus.images))]
        draws = _plan_digits(spec, digit_corpus, rng)
        img, lab, ov, m = render_scene(spec, draws, _resize_background(bg, spec.canvas))
        images.append(img), labels.append(lab), overlap.append(ov), meta.append(m)
    key = digit_corpus.fingerprint + background_corpus.fingerprint + spec.to_text()
    fp = _fingerprint(np.frombuffer(key.encode(), np.uint8))
    return assemble_bundle(spec, images, labels, overlap, meta, fp, *spec.canvas)


def preprocess_clevr_image(img: Image.Image) -> np.ndarray:
    """Downsample to 160x240 (HxW) and center-crop 128x128."""
    w, h = img.size
    tw, th = CLEVR_RESIZE
    if w < tw or h < th:
        raise ImageSizeError(f"CLEVR source must be at least {tw}x{th} (WxH), got {w}x{h}")
    small = img.convert("RGB").resize(CLEVR_RESIZE, Image.BILINEAR)
    top, left = (th - CLEVR_CROP) // 2, (tw - CLEVR_CROP) // 2
    return np.asarray(small.crop((left, top, left + CLEVR_CROP, top + CLEVR_CROP)))


def ingest_clevr(source_dir, spec: Optional[SceneSpec] = None) -> DatasetBundle:
    src = Path(source_dir)
    spec = spec or SceneSpec("clevr")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")) if src.is_dir() else []
    if not files:
        raise SourceError(f"no CLEVR images found in {src}")
    images, digests = [], []
    for p in files:
        try:
            with Image.open(p) as img:
                img.load()
                arr = preprocess_clevr_image(img)
        except ImageSizeError:
            raise
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", p, e)
            continue
        images.append(arr)
        digests.append(_fingerprint(arr))
    if not images:
        raise SourceError(f"no readable CLEVR images in {src}")
    fp = _fingerprint(np.frombuffer("".join(digests).encode(), np.uint8))
    return assemble_bundle(spec, images, None, None, [[] for _ in images], fp, CLEVR_CROP, CLEVR_CROP)


# -- sampling ------------------------------------------------------------------------

@dataclass
class SceneBatch:
    indices: np.ndarray
    images: np.ndarray  # (B, H, W, 3) float32
    labels: Optional[np.ndarray]
    overlap: Optional[np.ndarray]

    def __len__(self):
        return len(self.indices)

    def tensor(self):
        """Images as a ``(B, 3, H, W)`` float tensor."""
        import torch

        return torch.from_numpy(np.ascontiguousarray(self.images.transpose(0, 3, 1, 2)))


def sample_batch(bundle: DatasetBundle, split: str, batch_size: int, rng: np.random.Generator) -> SceneBatch:
    """Uniform sampling with replacement from one split."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pool = bundle.split_indices(split)
    if len(pool) == 0:
        raise ValueError(f"split {split!r} is empty")
    idx = pool[rng.integers(len(pool), size=batch_size)]
    return SceneBatch(
        indices=idx,
        images=bundle.images[idx].astype(np.float32) / 255.0,
        labels=None if bundle.labels is None else bundle.labels[idx].astype(np.int64),
        overlap=None if bundle.overlap is None else bundle.overlap[idx],
    )


def build(spec: SceneSpec, count: int, digits: Optional[DigitCorpus] = None,
          backgrounds: Optional[BackgroundCorpus] = None) -> DatasetBundle:
    if spec.variant == "cifar10_mm":
        return build_cifar_mm(spec, count, digits, backgrounds)
    if spec.variant == "clevr":
        raise ValueError("CLEVR scenes are ingested, not built; use ingest_clevr")
    return build_multi_mnist(spec, count, digits)

