"""Corpus ingestion and long-tail / rescaled subset synthesis.

Images are kept as one ``(N, H, W, 3)`` uint8 array; records are views into it.
Every dataset also carries ``source_index``, the position of each record in the
corpus it was drawn from, so subsets stay traceable to their origin.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import CorruptRecordError, InvalidSpecError, MalformedCorpusError

NUM_CLASSES = 10
IMAGE_SIZE = 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class ImageRecord:
    label: int
    pixels: np.ndarray  # H x W x 3, uint8


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = NUM_CLASSES
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be N x H x W x 3, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise CorruptRecordError("label outside [0, num_classes)")
        if self.source_index is None:
            self.source_index = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.source_index = np.asarray(self.source_index, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(int(self.labels[i]), self.images[i])

    def __iter__(self) -> Iterator[ImageRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def per_class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, positions) -> "LabeledDataset":
        """Dataset made of the records at ``positions`` (in the given order)."""
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDataset(
            self.images[positions],
            self.labels[positions],
            self.num_classes,
            self.source_index[positions],
        )


class Corpus(NamedTuple):
    train: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class ImbalanceSpec:
    p: float
    num_classes: int = NUM_CLASSES
    rounding: str = field(default="floor", init=False)

    def __post_init__(self):
        if not (self.p >= 1):
            raise InvalidSpecError(f"imbalance factor must be >= 1, got {self.p}")
        if self.num_classes < 1:
            raise InvalidSpecError("num_classes must be positive")


# --- binary corpus format -------------------------------------------------


def _record_len(height: int, width: int) -> int:
    return 1 + 3 * height * width


def read_batch_file(path, num_classes: int = NUM_CLASSES, height: int = IMAGE_SIZE,
                    width: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    rec = _record_len(height, width)
    if raw.size % rec:
        raise MalformedCorpusError(
            f"{path}: size {raw.size} is not a multiple of the record length {rec}"
        )
    raw = raw.reshape(-1, rec)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise CorruptRecordError(f"{path}: record {bad[0]} has label {labels[bad[0]]}")
    images = raw[:, 1:].reshape(-1, 3, height, width).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_batch_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    n = len(labels)
    planar = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(n, -1)
    out = np.empty((n, 1 + planar.shape[1]), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = planar
    Path(path).write_bytes(out.tobytes())


def load_corpus(path, num_classes: int = NUM_CLASSES, height: int = IMAGE_SIZE,
                width: int = IMAGE_SIZE) -> Corpus:
    """Read the five train batch files and the test batch file under ``path``."""
    root = Path(path)
    missing = [f for f in (*TRAIN_FILES, TEST_FILE) if not (root / f).is_file()]
    if missing:
        raise MalformedCorpusError(f"{root}: missing corpus files {missing}")
    parts = [read_batch_file(root / f, num_classes, height, width) for f in TRAIN_FILES]
    train = LabeledDataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        num_classes,
    )
    test = LabeledDataset(*read_batch_file(root / TEST_FILE, num_classes, height, width), num_classes)
    return Corpus(train, test)


def write_corpus(corpus: Corpus, path) -> Path:
    """Write ``corpus`` in the binary layout, train split over five files."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(corpus.train)), len(TRAIN_FILES))
    for name, idx in zip(TRAIN_FILES, chunks):
        write_batch_file(root / name, corpus.train.images[idx], corpus.train.labels[idx])
    write_batch_file(root / TEST_FILE, corpus.test.images, corpus.test.labels)
    return root


# --- synthetic corpus ------------------------------------------------------


def _class_palette(num_classes: int) -> np.ndarray:
    hues = np.arange(num_classes) / num_classes
    # crude HSV -> RGB at s=0.6, v=0.8
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6) % 6
    rgb = 0.8 - 0.8 * 0.6 * np.clip(np.minimum(k, 4 - k), 0, 1)
    return rgb * 255


def synthetic_split(num_classes: int, per_class: int, seed: int, height: int = IMAGE_SIZE,
                    width: int = IMAGE_SIZE, pattern: str = "grating", noise: float = 40.0) -> LabeledDataset:
    """Class-balanced synthetic images, ordered by record with labels cycling.

    ``pattern="grating"``: each class owns an orientation and a spatial
    frequency; phase, contrast, tint and pixel noise vary per image, so color
    carries no class information.
    ``pattern="noise"``: uniform noise, no class signal at all.
    """
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = np.tile(np.arange(num_classes), per_class)
    if pattern == "noise":
        images = rng.integers(0, 256, size=(n, height, width, 3), dtype=np.uint8)
        return LabeledDataset(images, labels, num_classes)
    if pattern != "grating":
        raise ValueError(f"unknown synthetic pattern {pattern!r}")

    freqs = np.linspace(1.5, 6.0, (num_classes + 1) // 2)
    angle = np.where(labels % 2 == 0, 0.0, np.pi / 2) + rng.normal(0, 0.08, n)
    freq = freqs[labels // 2] * rng.uniform(0.9, 1.1, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    images = np.empty((n, height, width, 3), dtype=np.uint8)
    palette = _class_palette(num_classes)
    for start in range(0, n, 4096):
        sl = slice(start, min(start + 4096, n))
        m = sl.stop - sl.start
        proj = np.cos(angle[sl])[:, None, None] * xx + np.sin(angle[sl])[:, None, None] * yy
        wave = np.sin(2 * np.pi * freq[sl][:, None, None] * proj + phase[sl][:, None, None])
        amp = rng.uniform(50, 90, m)[:, None, None, None]
        tint = palette[rng.integers(0, num_classes, m)] + rng.normal(0, 25, (m, 3))
        img = tint[:, None, None, :] + amp * wave[..., None] + rng.normal(0, noise, (m, height, width, 3))
        images[sl] = np.clip(img, 0, 255).astype(np.uint8)
    return LabeledDataset(images, labels, num_classes)


def synthetic_corpus(num_classes: int = NUM_CLASSES, train_per_class: int = 5000,
                     test_per_class: int = 1000, seed: int = 0, height: int = IMAGE_SIZE,
                     width: int = IMAGE_SIZE, pattern: str = "grating", noise: float = 40.0) -> Corpus:
    train = synthetic_split(num_classes, train_per_class, seed, height, width, pattern, noise)
    test = synthetic_split(num_classes, test_per_class, seed + 1_000_003, height, width, pattern, noise)
    return Corpus(train, test)


# --- subset synthesis ------------------------------------------------------


def imbalanced_count(n_c: int, p: float, c: int, num_classes: int) -> int:
    """floor(n_c * p ** (-c / (C - 1))), computed exactly.

    The float estimate is corrected with rational arithmetic on the equivalent
    integer inequality m**(C-1) * p**c <= n_c**(C-1).
    """
    if c == 0 or num_classes == 1 or p == 1:
        return int(n_c)
    e = num_classes - 1
    pc = Fraction(p) ** c
    bound = Fraction(n_c) ** e

    def fits(m: int) -> bool:
        return Fraction(m) ** e * pc <= bound

    m = math.floor(n_c * float(p) ** (-c / e))
    while m > 0 and not fits(m):
        m -= 1
    while fits(m + 1):
        m += 1
    return m


def imbalanced_counts(n_c: int, spec: ImbalanceSpec) -> list[int]:
    return [imbalanced_count(n_c, spec.p, c, spec.num_classes) for c in range(spec.num_classes)]


def _balanced_size(ds: LabeledDataset) -> int:
    counts = ds.per_class_counts
    if len(set(counts)) != 1:
        raise InvalidSpecError(f"source dataset is not class-balanced: {counts}")
    return counts[0]


def _sample_per_class(ds: LabeledDataset, keep: list[int], seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    chosen = []
    for c, k in enumerate(keep):
        idx = np.flatnonzero(ds.labels == c)
        if k > idx.size:
            raise InvalidSpecError(f"class {c} has {idx.size} records, {k} requested")
        chosen.append(rng.choice(idx, size=k, replace=False))
    positions = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, np.int64)
    return ds.subset(positions)


def make_imbalanced(ds: LabeledDataset, spec: ImbalanceSpec, seed: int) -> LabeledDataset:
    """Exponential long-tail subset: class c keeps floor(N_c * p^(-c/(C-1)))."""
    if spec.num_classes != ds.num_classes:
        raise InvalidSpecError("spec.num_classes does not match the dataset")
    n_c = _balanced_size(ds)
    return _sample_per_class(ds, imbalanced_counts(n_c, spec), seed)


def rescaled_counts(total: int, num_classes: int) -> list[int]:
    base, extra = divmod(total, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def make_balanced_rescaled(ds: LabeledDataset, total: int, seed: int) -> LabeledDataset:
    """Uniformly shrink a balanced dataset to ``total`` records."""
    if total < 0 or total > len(ds):
        raise InvalidSpecError(f"total {total} outside [0, {len(ds)}]")
    _balanced_size(ds)
    return _sample_per_class(ds, rescaled_counts(total, ds.num_classes), seed)


def class_histogram(ds: LabeledDataset) -> list[int]:
    return ds.per_class_counts


def export_distribution(ds: LabeledDataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count"])
        for c, n in enumerate(class_histogram(ds)):
            w.writerow([c, n])
    return path


def channel_stats(ds: LabeledDataset) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std of the pixels, on the [0, 1] scale."""
    x = ds.images.reshape(-1, 3).astype(np.float64) / 255.0
    return tuple(x.mean(0).tolist()), tuple(x.std(0).tolist())
