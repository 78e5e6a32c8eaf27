"""Dataset readers (CIFAR-10 binary, IDX) and the synthetic blob generator."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import FormatError
from .nn import get_dtype

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Standardize every dataset per channel with statistics of ``train`` only."""
    mean, std = channel_stats(train.images)
    dtype = get_dtype()

    def apply(ds):
        x = (ds.images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
        return Dataset(x.astype(dtype), ds.labels, ds.num_classes, ds.split)

    return tuple(apply(ds) for ds in (train, *others))


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def read_cifar10_batch(path, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``uint8`` images [N,3,32,32] and labels from one ``.bin`` batch."""
    size = os.path.getsize(path)
    if size == 0 or size % CIFAR_RECORD:
        raise FormatError(f"corrupt batch {path}: {size} bytes is not a multiple of {CIFAR_RECORD}")
    count = size // CIFAR_RECORD if n is None else min(n, size // CIFAR_RECORD)
    raw = np.fromfile(path, dtype=np.uint8, count=count * CIFAR_RECORD).reshape(count, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"corrupt batch {path}: record {bad} has label {labels[bad]}")
    return raw[:, 1:].reshape(count, 3, 32, 32), labels


def write_cifar10_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    if images.shape[1] != CIFAR_RECORD - 1:
        raise FormatError("CIFAR-10 records hold 3x32x32 pixels")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    rec.tofile(path)


def load_cifar10(directory, split: str = "train", n: int | None = None) -> Dataset:
    """First ``n`` records of the train (5 batches) or test split, scaled to [0, 1]."""
    files = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    imgs, labs = [], []
    remaining = n
    for name in files:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        x, y = read_cifar10_batch(path, remaining)
        imgs.append(x)
        labs.append(y)
        if remaining is not None:
            remaining -= len(y)
            if remaining <= 0:
                break
    images = np.concatenate(imgs).astype(get_dtype()) / 255
    return Dataset(images, np.concatenate(labs), 10, split)


def load_cifar10_splits(directory, n_train: int | None = 10_000, n_test: int | None = None):
    """Normalized ``(train, test)`` pair; defaults to the 10k-image training subset."""
    return normalize(load_cifar10(directory, "train", n_train), load_cifar10(directory, "test", n_test))


# ---------------------------------------------------------------------------
# IDX (MNIST-style)
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header != count:
        raise FormatError(f"{path}: payload holds {len(blob) - header} bytes, dims {dims} need {count}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Grayscale images [N,1,H,W] scaled to [0, 1] plus labels."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 dims (N, H, W), got {images.ndim}")
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} != label count {len(labels)}")
    x = images[:, None].astype(get_dtype()) / 255
    return Dataset(x, labels.astype(np.int64), num_classes, split)


def load_idx_dir(directory, n_train: int | None = None, n_test: int | None = None):
    """Normalized (train, test) from the standard MNIST file names in ``directory``."""
    def pair(prefix):
        return (
            os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
            os.path.join(directory, f"{prefix}-labels-idx1-ubyte"),
        )

    train = load_idx(*pair("train"), split="train")
    test = load_idx(*pair("t10k"), split="test")
    if n_train is not None:
        train = train.subset(n_train)
    if n_test is not None:
        test = test.subset(n_test)
    return normalize(train, test)


# ---------------------------------------------------------------------------
# synthetic blobs
# ---------------------------------------------------------------------------


def synth_dataset(
    seed: int,
    n: int,
    classes: int = 2,
    shape=(3, 16, 16),
    signal: float = 0.5,
    split: str = "train",
) -> Dataset:
    """Gaussian class blobs: ``signal * template[label] + N(0, 1)`` per pixel.

    Labels cycle through the classes, then get shuffled, so every class gets
    ``n // classes`` or one more samples.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    templates = rng.stream(seed, "data", 0).standard_normal((classes, *shape))
    labels = np.arange(n) % classes
    rng.stream(seed, "data", 1).shuffle(labels)
    noise = rng.stream(seed, "data", 2).standard_normal((n, *shape))
    images = (signal * templates[labels] + noise).astype(get_dtype())
    return Dataset(images, labels.astype(np.int64), classes, split)


def synth_splits(seed: int, n_train: int, n_test: int, classes: int = 2, shape=(3, 16, 16), signal: float = 0.5):
    """Normalized (train, test) drawn from one set of class templates."""
    full = synth_dataset(seed, n_train + n_test, classes, shape, signal)
    train = Dataset(full.images[:n_train], full.labels[:n_train], classes, "train")
    test = Dataset(full.images[n_train:], full.labels[n_train:], classes, "test")
    return normalize(train, test)


def batches(n: int, batch_size: int, seed: int | None = None, epoch: int = 0):
    """Index arrays for one epoch; shuffled from ``(seed, epoch)`` when seed is given."""
    order = np.arange(n) if seed is None else rng.stream(seed, "shuffle", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
