"""CIFAR ingestion and preprocessing.

Reads the official binary distributions, converts RGB to YUV, normalizes
per channel with training-set statistics, takes deterministic p% prefixes,
and applies translation/flip augmentation.  A seeded synthetic generator
stands in when the real files are not available.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_BYTES = 3 * 32 * 32
RECORD_BYTES = {"cifar10": 1 + IMAGE_BYTES, "cifar100": 2 + IMAGE_BYTES}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100}
TRAIN_SIZE, TEST_SIZE = 50000, 10000

# BT.601 luma with analogue U/V scale factors, no offsets.
RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.492 * 0.299, -0.492 * 0.587, 0.492 * (1 - 0.114)],
    [0.877 * (1 - 0.299), -0.877 * 0.587, -0.877 * 0.114],
])

NORM_EPS = 1e-5


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # per channel
    std: np.ndarray


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray            # [N, 3, 32, 32] float32
    labels: np.ndarray            # [N] int64
    colourspace: str = "RGB"
    split: str = "train"
    variant: str = "cifar10"
    raw: np.ndarray | None = None  # uint8 pixels exactly as stored on disk
    coarse_labels: np.ndarray | None = None
    stats: NormStats | None = None
    source: str = "cifar"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.variant]

    def take(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       raw=pick(self.raw), coarse_labels=pick(self.coarse_labels))


@dataclass(frozen=True)
class AugmentConfig:
    max_shift: int = 4
    horizontal_flip: bool = True

    def __post_init__(self):
        if not 0 <= self.max_shift < 32:
            raise ValueError("max_shift must lie in [0, 32)")


# ---------------------------------------------------------------------------
# loading


def _files(root: Path, variant: str) -> tuple[list[Path], list[Path]] | None:
    if variant == "cifar10":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]
        subdir = "cifar-10-batches-bin"
    elif variant == "cifar100":
        names = ["train.bin"], ["test.bin"]
        subdir = "cifar-100-binary"
    else:
        raise ValueError(f"unknown dataset variant {variant!r}")
    for d in (root, root / subdir):
        train = [d / n for n in names[0]]
        test = [d / n for n in names[1]]
        if all(p.is_file() for p in train + test):
            return train, test
    return None


def find_data_dir(variant: str, data_dir: str | os.PathLike | None = None) -> Path | None:
    """Directory holding the binaries for ``variant``, from the argument or ``$DATA_DIR``."""
    for cand in (data_dir, os.environ.get("DATA_DIR")):
        if cand and _files(Path(cand), variant) is not None:
            return Path(cand)
    return None


def _read_records(paths: list[Path], variant: str) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    rec = RECORD_BYTES[variant]
    raws, labels, coarse = [], [], []
    for path in paths:
        buf = np.fromfile(path, dtype=np.uint8)
        if buf.size % rec:
            whole = buf.size // rec
            raise DataError(f"{path}: truncated record at byte offset {whole * rec} "
                            f"({buf.size} bytes is not a multiple of {rec})")
        recs = buf.reshape(-1, rec)
        if variant == "cifar10":
            labels.append(recs[:, 0])
        else:
            coarse.append(recs[:, 0])
            labels.append(recs[:, 1])
        raws.append(recs[:, rec - IMAGE_BYTES:].reshape(-1, 3, 32, 32))
    return (np.concatenate(raws), np.concatenate(labels).astype(np.int64),
            np.concatenate(coarse).astype(np.int64) if coarse else None)


def load_cifar(path: str | os.PathLike, variant: str = "cifar10",
               strict: bool = True) -> tuple[Dataset, Dataset]:
    """Read the official binary files into (train, test) datasets, pixels in [0, 1].

    ``strict`` also insists on the canonical 50000/10000 split sizes.
    """
    found = _files(Path(path), variant)
    if found is None:
        raise DataError(f"no {variant} binaries under {path}")
    out = []
    for split, paths, expected in (("train", found[0], TRAIN_SIZE), ("test", found[1], TEST_SIZE)):
        raw, labels, coarse = _read_records(paths, variant)
        if strict and len(labels) != expected:
            raise DataError(f"{variant} {split}: expected {expected} records, found {len(labels)}")
        k = NUM_CLASSES[variant]
        if labels.size and labels.max() >= k:
            bad = int(np.argmax(labels >= k))
            raise DataError(f"{variant} {split}: label {labels[bad]} out of range in record {bad}")
        out.append(Dataset(raw.astype(np.float32) / 255.0, labels, "RGB", split, variant,
                           raw=raw, coarse_labels=coarse))
    return out[0], out[1]


def record_bytes(ds: Dataset, i: int) -> bytes:
    """Re-serialize record ``i`` in the on-disk layout."""
    if ds.raw is None:
        raise DataError("dataset does not carry raw pixels")
    if ds.variant == "cifar10":
        head = bytes([int(ds.labels[i])])
    else:
        coarse = int(ds.coarse_labels[i]) if ds.coarse_labels is not None else int(ds.labels[i]) // 5
        head = bytes([coarse, int(ds.labels[i])])
    return head + ds.raw[i].tobytes()


def write_cifar_binary(directory: str | os.PathLike, train: Dataset, test: Dataset) -> Path:
    """Write datasets in the official binary layout (used for fixtures and offline runs)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    variant = train.variant

    def dump(path: Path, ds: Dataset, idx: np.ndarray):
        with open(path, "wb") as fh:
            for i in idx:
                fh.write(record_bytes(ds, int(i)))

    if variant == "cifar10":
        for k, idx in enumerate(np.array_split(np.arange(len(train)), 5), start=1):
            dump(d / f"data_batch_{k}.bin", train, idx)
        dump(d / "test_batch.bin", test, np.arange(len(test)))
    else:
        dump(d / "train.bin", train, np.arange(len(train)))
        dump(d / "test.bin", test, np.arange(len(test)))
    return d


def synthetic_cifar(variant: str = "cifar10", n_train: int = 500, n_test: int = 200,
                    seed: int = 0, signal: float = 0.15) -> tuple[Dataset, Dataset]:
    """Seeded Gaussian images with uniform labels.

    Each class adds a fixed smooth colour pattern of amplitude ``signal`` so
    that a model has something to learn; ``signal=0`` gives pure noise.
    """
    rng = np.random.default_rng(seed)
    k = NUM_CLASSES[variant]
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    freq = rng.uniform(0.5, 3.0, size=(k, 3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(k, 3))
    templates = signal * np.sin(2 * np.pi * (freq[..., 0, None, None] * xx + freq[..., 1, None, None] * yy)
                                + phase[..., None, None])

    def make(n: int, split: str) -> Dataset:
        labels = rng.integers(0, k, size=n)
        pix = 0.5 + 0.2 * rng.standard_normal((n, 3, 32, 32)) + templates[labels]
        raw = np.clip(np.rint(pix * 255), 0, 255).astype(np.uint8)
        coarse = labels // 5 if variant == "cifar100" else None
        return Dataset(raw.astype(np.float32) / 255.0, labels.astype(np.int64), "RGB", split, variant,
                       raw=raw, coarse_labels=coarse, source="synthetic")

    return make(n_train, "train"), make(n_test, "test")


def load_or_synthesize(variant: str, data_dir=None, seed: int = 0, n_train: int = TRAIN_SIZE,
                       n_test: int = TEST_SIZE, strict: bool = True) -> tuple[Dataset, Dataset]:
    """Real CIFAR when found, otherwise the synthetic substitute (with a warning)."""
    root = find_data_dir(variant, data_dir)
    if root is not None:
        return load_cifar(root, variant, strict)
    log.warning("%s binaries not found (set --data-dir or DATA_DIR); using synthetic data", variant)
    return synthetic_cifar(variant, n_train, n_test, seed)


# ---------------------------------------------------------------------------
# preprocessing


def rgb_to_yuv(ds: Dataset) -> Dataset:
    if ds.colourspace != "RGB":
        raise DataError(f"rgb_to_yuv expects RGB data, got {ds.colourspace}")
    yuv = np.einsum("dc,nchw->ndhw", RGB_TO_YUV.astype(ds.images.dtype), ds.images)
    return replace(ds, images=yuv.astype(ds.images.dtype), colourspace="YUV")


def channel_stats(images: np.ndarray) -> NormStats:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    var = images.var(axis=(0, 2, 3), dtype=np.float64)
    return NormStats(mean, np.sqrt(np.maximum(var, NORM_EPS)))


def apply_stats(ds: Dataset, stats: NormStats) -> Dataset:
    m = stats.mean[None, :, None, None]
    s = stats.std[None, :, None, None]
    return replace(ds, images=((ds.images - m) / s).astype(ds.images.dtype), stats=stats)


def normalize_input(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, NormStats]:
    """Zero-mean, unit-variance channels using training statistics for both splits.

    Variances below 1e-5 are floored there, so constant channels stay finite.
    """
    if train.colourspace != test.colourspace:
        raise DataError("train and test colourspaces differ")
    stats = channel_stats(train.images)
    return apply_stats(train, stats), apply_stats(test, stats), stats


def subset_size(n: int, p: float) -> int:
    return math.ceil(round(p * n / 100, 9))


def subset(train: Dataset, p: float, stratified: bool = False) -> Dataset:
    """The first ceil(p*N/100) examples in canonical order.

    ``stratified`` instead takes the first ceil(p*n_c/100) of every class,
    still in canonical order.
    """
    if not 0 < p <= 100:
        raise ValueError(f"p must lie in (0, 100], got {p}")
    if stratified:
        keep = np.zeros(len(train), dtype=bool)
        for c in np.unique(train.labels):
            idx = np.flatnonzero(train.labels == c)
            keep[idx[:subset_size(len(idx), p)]] = True
        idx = np.flatnonzero(keep)
    else:
        idx = np.arange(subset_size(len(train), p))
    if idx.size == 0:
        raise DataError(f"{p}% of {len(train)} examples is empty")
    out = train.take(idx)
    missing = train.num_classes - np.count_nonzero(class_counts(out))
    if missing:
        log.warning("%g%% subset omits %d of %d classes", p, missing, train.num_classes)
    return out


def class_counts(ds: Dataset) -> np.ndarray:
    return np.bincount(ds.labels, minlength=ds.num_classes)


def prepare(train: Dataset, test: Dataset, p: float = 100,
            stratified: bool = False) -> tuple[Dataset, Dataset, NormStats]:
    """Subset, convert to YUV, then normalize with statistics of the subset."""
    train = subset(train, p, stratified)
    return normalize_input(rgb_to_yuv(train), rgb_to_yuv(test))


# ---------------------------------------------------------------------------
# augmentation


def shift(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate a [C, H, W] image by (dx, dy) pixels, zero-filling vacated pixels."""
    c, h, w = image.shape
    out = np.zeros_like(image)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    out[:, max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        image[:, max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    return out


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random translation in [-max_shift, max_shift]^2, then a coin-flip horizontal reflection."""
    out = np.empty_like(batch)
    s = config.max_shift
    for i, img in enumerate(batch):
        dx, dy = rng.integers(-s, s + 1, size=2) if s else (0, 0)
        img = shift(img, int(dx), int(dy)) if (dx or dy) else img
        if config.horizontal_flip and rng.random() < 0.5:
            img = hflip(img)
        out[i] = img
    return out
