"""Manifest handling, split protocol, image I/O, augmentation and batching."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    CapacityError,
    ConfigError,
    CorruptionError,
    DuplicateError,
    EmptyDatasetError,
    FormatError,
    TaxonomyError,
    UsageError,
)
from .metrics import CLASSES_3, CLASSES_7, map_to_3class

SOURCES = ("histopathology", "consensus", "confocal")
SPLITS = ("train", "val", "test", "unassigned")
MANIFEST_COLUMNS = ("path", "label", "source", "split")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    source: str
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    records: list

    def __len__(self):
        return len(self.records)

    def class_counts(self) -> dict:
        c = Counter(r.label for r in self.records)
        return {k: c.get(k, 0) for k in CLASSES_7}

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in self.records:
            w.writerow([r.path, r.label, r.source, r.split])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")


def validate_records(records: Sequence[Record]) -> DatasetManifest:
    seen = set()
    for i, r in enumerate(records):
        if r.label not in CLASSES_7:
            raise TaxonomyError(f"row {i + 1}: unknown label {r.label!r}")
        if r.source not in SOURCES:
            raise TaxonomyError(f"row {i + 1}: unknown ground-truth source {r.source!r}")
        if r.split not in SPLITS:
            raise TaxonomyError(f"row {i + 1}: unknown split {r.split!r}")
        if r.path in seen:
            raise DuplicateError(f"row {i + 1}: duplicate path {r.path!r}")
        seen.add(r.path)
    return DatasetManifest(list(records))


def load_manifest(path) -> DatasetManifest:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise FormatError(f"manifest is missing column(s): {', '.join(missing)}")
        records = []
        for row in reader:
            if any(row.get(c) is None for c in MANIFEST_COLUMNS):
                raise FormatError(f"line {reader.line_num}: too few fields")
            records.append(Record(*(row[c].strip() for c in MANIFEST_COLUMNS)))
    return validate_records(records)


def _apportion(counts: dict, fraction: float) -> dict:
    """Largest-remainder rounding of ``fraction * count`` per key, hitting the rounded total."""
    quotas = {k: fraction * n for k, n in counts.items()}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    target = int(round(fraction * sum(counts.values())))
    by_remainder = sorted(quotas, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in by_remainder[: max(0, target - sum(alloc.values()))]:
        alloc[k] += 1
    return alloc


def assign_splits(
    manifest: DatasetManifest, test_per_group: int = 100, val_fraction: float = 0.2, seed: int = 0
) -> DatasetManifest:
    """Draw a fixed-size test set per 3-class group, then a stratified train/val split."""
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    records = manifest.records
    groups = {g: [] for g in CLASSES_3}
    for i, r in enumerate(records):
        groups[map_to_3class(r.label)].append(i)
    for g, idx in groups.items():
        if len(idx) < test_per_group:
            raise CapacityError(f"group {g!r} has {len(idx)} images, {test_per_group} needed for test")

    split = ["train"] * len(records)
    for g in CLASSES_3:
        for i in rng.choice(groups[g], size=test_per_group, replace=False):
            split[i] = "test"

    by_class = {c: [] for c in CLASSES_7}
    for i, r in enumerate(records):
        if split[i] != "test":
            by_class[r.label].append(i)
    n_val = _apportion({c: len(v) for c, v in by_class.items()}, val_fraction)
    for c in CLASSES_7:
        idx = by_class[c]
        if idx:
            for i in rng.permutation(idx)[: n_val[c]]:
                split[i] = "val"
    return DatasetManifest([replace(r, split=s) for r, s in zip(records, split)])


# -- images -----------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _decode_ppm(data: bytes) -> np.ndarray:
    pos = 2
    fields = []
    for _ in range(3):
        m = _PPM_TOKEN.match(data, pos)
        if not m:
            raise CorruptionError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError("malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM supported, maxval {maxval}")
    if w < 1 or h < 1:
        raise FormatError("PPM has empty extent")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise CorruptionError("PPM header not terminated")
    pos += 1
    need = w * h * 3
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise CorruptionError(f"PPM pixel data truncated: {len(raw)} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def _decode_png(data: bytes) -> np.ndarray:
    from PIL import Image

    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (OSError, SyntaxError) as exc:
        raise CorruptionError(f"PNG data unreadable: {exc}") from None
    if img.mode in ("L", "P", "RGBA", "LA"):
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise FormatError(f"PNG mode {img.mode!r} is not 8-bit RGB")
    return np.asarray(img, dtype=np.uint8)


def decode_image(path) -> np.ndarray:
    """Read a P6 PPM or PNG file into a ``[3, H, W]`` float map in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] == b"P6":
        hwc = _decode_ppm(data)
    elif data[:8] == PNG_SIGNATURE:
        hwc = _decode_png(data)
    else:
        raise FormatError(f"{path}: unsupported image container")
    return hwc.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes(image: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1] to ``[H, W, 3]`` uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(image: np.ndarray, path):
    hwc = to_bytes(image)
    h, w, _ = hwc.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + hwc.tobytes())


def write_png(image: np.ndarray, path):
    from PIL import Image

    Image.fromarray(to_bytes(image), mode="RGB").save(path, format="PNG")


def write_image(image: np.ndarray, path):
    if str(path).lower().endswith(".png"):
        write_png(image, path)
    else:
        write_ppm(image, path)


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``[C, H, W]`` at fractional pixel coordinates; zero outside the image."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)))
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = np.clip(y0.astype(np.int64), -1, h) + 1
    x0 = np.clip(x0.astype(np.int64), -1, w) + 1
    y1 = np.minimum(y0 + 1, h + 1)
    x1 = np.minimum(x0 + 1, w + 1)
    return (
        padded[:, y0, x0] * ((1 - fy) * (1 - fx))
        + padded[:, y0, x1] * ((1 - fy) * fx)
        + padded[:, y1, x0] * (fy * (1 - fx))
        + padded[:, y1, x1] * (fy * fx)
    )


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize with half-pixel centres and edge clamping."""
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, yy, xx)


# -- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges for the training-time transforms.

    ``rotation_max`` is a fraction of a full turn; ``zoom_max`` a relative
    scale change.  Factor ranges are closed intervals.
    """

    rotation_max: float = 0.25
    contrast: tuple = (0.9, 1.1)
    brightness: tuple = (0.9, 1.1)
    zoom_max: float = 0.25
    saturation: tuple = (0.9, 1.1)
    seed: int = 0

    def validate(self) -> "AugmentationConfig":
        for name in ("rotation_max", "zoom_max"):
            v = getattr(self, name)
            if not 0 <= v <= 0.25:
                raise ConfigError(f"{name} must lie in [0, 0.25], got {v}")
        for name in ("contrast", "brightness", "saturation"):
            lo, hi = getattr(self, name)
            if not 0.9 <= lo <= hi <= 1.1:
                raise ConfigError(f"{name} range must lie within [0.9, 1.1], got {(lo, hi)}")
        return self

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), 0.0, (1.0, 1.0), seed)


class AugmentParams(NamedTuple):
    rotation: float  # turns
    contrast: float
    brightness: float
    zoom: float
    saturation: float


def draw_params(config: AugmentationConfig, sample_index: int, epoch: int = 0) -> AugmentParams:
    rng = np.random.default_rng([config.seed, epoch, sample_index])
    return AugmentParams(
        rotation=float(rng.uniform(-config.rotation_max, config.rotation_max)),
        contrast=float(rng.uniform(*config.contrast)),
        brightness=float(rng.uniform(*config.brightness)),
        zoom=float(rng.uniform(1 - config.zoom_max, 1 + config.zoom_max)),
        saturation=float(rng.uniform(*config.saturation)),
    )


def _grid(h: int, w: int):
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return yy - (h - 1) / 2, xx - (w - 1) / 2


def apply_augmentation(sample: np.ndarray, p: AugmentParams) -> np.ndarray:
    _, h, w = sample.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dy, dx = _grid(h, w)
    x = bilinear_sample(sample, cy + dy / p.zoom, cx + dx / p.zoom)
    theta = 2 * math.pi * p.rotation
    cos, sin = math.cos(theta), math.sin(theta)
    x = bilinear_sample(x, cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    m = x.mean(axis=(1, 2), keepdims=True)
    x = np.clip(((x - m) * p.contrast + m) * p.brightness, 0.0, 1.0)
    gray = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    x = gray + p.saturation * (x - gray)
    return np.clip(x, 0.0, 1.0)


def augment(sample: np.ndarray, config: AugmentationConfig, sample_index: int, epoch: int = 0) -> np.ndarray:
    """Zoom, rotate, then contrast/brightness and saturation, drawn per sample."""
    return apply_augmentation(sample, draw_params(config, sample_index, epoch))


# -- batching ---------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    label: int
    split: str = "train"
    index: int = 0


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def load_samples(
    manifest: DatasetManifest, classes: Sequence[str], input_size=None, root=None
) -> list:
    """Decode every record into a :class:`Sample`, resizing to ``input_size`` if given."""
    pos = {c: i for i, c in enumerate(classes)}
    root = Path(root) if root is not None else None
    out = []
    for i, r in enumerate(manifest.records):
        if r.label not in pos:
            raise TaxonomyError(f"label {r.label!r} not among model classes")
        p = Path(r.path)
        img = decode_image(p if p.is_absolute() or root is None else root / p)
        if input_size is not None:
            c, h, w = input_size
            if img.shape[0] != c:
                raise FormatError(f"{r.path}: {img.shape[0]} channels, model expects {c}")
            img = resize_bilinear(img, h, w)
        out.append(Sample(img, pos[r.label], r.split, i))
    return out


def make_batches(
    samples: Sequence[Sample],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    augment_config: Optional[AugmentationConfig] = None,
    epoch: int = 0,
) -> list:
    """Split samples into batches; the final partial batch is kept.

    With a ``shuffle_seed`` the order is a seeded permutation per epoch.
    Augmentation is refused for anything outside the train split.
    """
    if batch_size < 1:
        raise UsageError("batch size must be at least 1")
    if not samples:
        raise EmptyDatasetError("no samples to batch")
    if augment_config is not None:
        bad = {s.split for s in samples if s.split != "train"}
        if bad:
            raise UsageError(f"augmentation applies to the train split only, got {sorted(bad)}")
    n = len(samples)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        chosen = [samples[i] for i in order[start : start + batch_size]]
        imgs = [
            augment(s.image, augment_config, s.index, epoch) if augment_config is not None else s.image
            for s in chosen
        ]
        batches.append(
            Batch(
                np.stack(imgs),
                np.array([s.label for s in chosen], dtype=np.int64),
                np.array([s.index for s in chosen], dtype=np.int64),
            )
        )
    return batches


# -- synthetic data ---------------------------------------------------------

_QUADRANTS = ((0, 0), (1, 1), (0, 1), (1, 0))  # (row half, column half) per class


def quadrant_image(label: int, rng: np.random.Generator, size: int = 32, patch: int = 8) -> np.ndarray:
    """Dim noise with one bright square inside the quadrant that encodes ``label``."""
    img = rng.uniform(0.0, 0.3, size=(3, size, size))
    half = size // 2
    qy, qx = _QUADRANTS[label]
    y = qy * half + int(rng.integers(0, half - patch + 1))
    x = qx * half + int(rng.integers(0, half - patch + 1))
    img[:, y : y + patch, x : x + patch] = rng.uniform(0.8, 1.0)
    return img


def quadrant_samples(n: int, seed: int, num_classes: int = 2, size: int = 32, split: str = "train") -> list:
    """Balanced synthetic set; class k puts its bright patch in quadrant k."""
    if not 2 <= num_classes <= 4:
        raise ValueError("quadrant task supports 2 to 4 classes")
    rng = np.random.default_rng(seed)
    return [Sample(quadrant_image(i % num_classes, rng, size), i % num_classes, split, i) for i in range(n)]


def synthetic_manifest(counts: dict, seed: int = 0) -> DatasetManifest:
    """Records with placeholder paths in the given per-class quantities."""
    rng = np.random.default_rng(seed)
    records = []
    for label in CLASSES_7:
        for _ in range(counts.get(label, 0)):
            records.append(Record(f"img_{len(records):05d}.ppm", label, SOURCES[int(rng.integers(0, 3))]))
    return validate_records(records)
