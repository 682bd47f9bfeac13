"""MNIST (IDX) and CIFAR-10 (binary batch) loaders, class subsets and batching.

Directory layout under a dataset root (``$BERLAB_DATA`` by default)::

    mnist/train-images-idx3-ubyte    (optionally .gz)
    mnist/train-labels-idx1-ubyte
    mnist/t10k-images-idx3-ubyte
    mnist/t10k-labels-idx1-ubyte
    cifar-10-batches-bin/data_batch_{1..5}.bin
    cifar-10-batches-bin/test_batch.bin

Pixels are scaled to [0, 1] and then standardized with the fixed constants
below. No augmentation is applied.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor_core import DTYPE

DATA_ENV = "BERLAB_DATA"

MNIST_MEAN, MNIST_STD = 0.1307, 0.3081
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class DatasetMissingError(DatasetError, FileNotFoundError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class RecordSizeError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray            # (N, C, H, W) float32, standardized
    labels: np.ndarray            # (N,) int64 in [0, num_classes)
    num_classes: int
    split: str
    class_map: tuple | None = None  # original class id for each dense label
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, n: int) -> "LabeledDataset":
        """First ``n`` items (order of the source file)."""
        return replace(self, images=self.images[:n], labels=self.labels[:n])


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path.home() / "data"


def _read(path: Path) -> bytes:
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            return gzip.decompress(gz.read_bytes())
        raise DatasetMissingError(f"dataset file not found: {path}")
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array shaped by its header."""
    if len(raw) < 4:
        raise TruncatedFileError(f"{source}: file shorter than the IDX magic number")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(f"{source}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{source}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{source}: header announces {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def _standardize(pixels: np.ndarray, mean, std) -> np.ndarray:
    x = pixels.astype(DTYPE) / DTYPE(255)
    mean = np.asarray(mean, DTYPE).reshape(1, -1, 1, 1)
    std = np.asarray(std, DTYPE).reshape(1, -1, 1, 1)
    return (x - mean) / std


def _load_mnist_split(d: Path, prefix: str, split: str) -> LabeledDataset:
    img_path = d / f"{prefix}-images-idx3-ubyte"
    lbl_path = d / f"{prefix}-labels-idx1-ubyte"
    images = parse_idx(_read(img_path), IDX_IMAGES_MAGIC, str(img_path))
    labels = parse_idx(_read(lbl_path), IDX_LABELS_MAGIC, str(lbl_path))
    if images.ndim != 3:
        raise BadMagicError(f"{img_path}: expected 3 dimensions, got {images.ndim}")
    if len(images) != len(labels):
        raise CountMismatchError(f"{img_path} has {len(images)} images but {lbl_path} has {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise DatasetError(f"{lbl_path}: label {labels.max()} outside [0, 9]")
    x = _standardize(images[:, None], (MNIST_MEAN,), (MNIST_STD,))
    return LabeledDataset(x, labels.astype(np.int64), 10, split, name="mnist")


def load_mnist(root=None) -> tuple[LabeledDataset, LabeledDataset]:
    """Load ``(train, test)`` from ``<root>/mnist`` (or ``root`` itself if it holds the files)."""
    d = data_root(root)
    if (d / "mnist").is_dir():
        d = d / "mnist"
    return _load_mnist_split(d, "train", "train"), _load_mnist_split(d, "t10k", "test")


def parse_cifar10_batch(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split 3073-byte records into (uint8 images (N,3,32,32), labels)."""
    if len(raw) % CIFAR_RECORD:
        raise RecordSizeError(f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.size and labels.max() > 9:
        raise DatasetError(f"{source}: label byte {labels.max()} outside [0, 9]")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _load_cifar_files(paths, split) -> LabeledDataset:
    parts = [parse_cifar10_batch(_read(p), str(p)) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts]).astype(np.int64)
    return LabeledDataset(_standardize(images, CIFAR10_MEAN, CIFAR10_STD), labels, 10, split, name="cifar10")


def load_cifar10(root=None) -> tuple[LabeledDataset, LabeledDataset]:
    """Load ``(train, test)`` from ``<root>/cifar-10-batches-bin`` (or ``root`` itself)."""
    d = data_root(root)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train = _load_cifar_files([d / f"data_batch_{i}.bin" for i in range(1, 6)], "train")
    test = _load_cifar_files([d / "test_batch.bin"], "test")
    return train, test


def choose_classes(num_classes: int, k: int, seed: int) -> tuple:
    """Seed-deterministic choice of ``k`` distinct class ids, sorted."""
    if not 1 <= k <= num_classes:
        raise ValueError(f"cannot choose {k} of {num_classes} classes")
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(c) for c in rng.choice(num_classes, size=k, replace=False)))


def subset_classes(ds: LabeledDataset, class_ids=None, *, k: int | None = None, seed: int = 0) -> LabeledDataset:
    """Keep only items of the given (or ``k`` randomly chosen) classes; relabel densely 0..k-1.

    Dense labels follow the sorted order of the original class ids.
    """
    if class_ids is None:
        if k is None:
            raise ValueError("give class_ids or k")
        class_ids = choose_classes(ds.num_classes, k, seed)
    class_ids = tuple(sorted(set(int(c) for c in class_ids)))
    if not class_ids:
        raise ValueError("empty class selection")
    bad = [c for c in class_ids if not 0 <= c < ds.num_classes]
    if bad:
        raise ValueError(f"classes {bad} do not exist in a {ds.num_classes}-class dataset")
    remap = np.full(ds.num_classes, -1, dtype=np.int64)
    remap[list(class_ids)] = np.arange(len(class_ids))
    new = remap[ds.labels]
    keep = new >= 0
    if not keep.any():
        raise ValueError("class selection matched no items")
    original = class_ids if ds.class_map is None else tuple(ds.class_map[c] for c in class_ids)
    return replace(ds, images=ds.images[keep], labels=new[keep], num_classes=len(class_ids), class_map=original)


def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches(ds: LabeledDataset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
    """Yield ``(images, labels)``; order is a permutation seeded by (shuffle_seed, epoch).

    ``shuffle_seed=None`` keeps file order. The final partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        yield ds.images[idx], ds.labels[idx]
