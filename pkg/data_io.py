"""MNIST (IDX) and CIFAR-10 (binary) readers, fixture writers and mini-batch sampling."""
import gzip
import logging
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

import constants
from core_math import Rng, Tensor, rng_permutation
from errors import DataFormatError, SubsetSizeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_RECORD = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE
NUM_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass(frozen=True)
class Dataset:
    images: Tensor        # M x C x H x W
    labels: np.ndarray    # M, int64
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataFormatError("Labels must lie in [0, 10)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.split)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise FileNotFoundError(f"Data file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{what}: truncated IDX header ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DataFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise DataFormatError(f"{what}: expected {expected} payload bytes for dims {dims}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if pixels.shape[0] != labels.shape[0]:
        raise DataFormatError(f"Count mismatch: {pixels.shape[0]} images vs {labels.shape[0]} labels")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    logging.info(f"Loaded IDX {split} set: {images.shape[0]} images of {images.shape[2]}x{images.shape[3]}")
    return Dataset(images, labels.astype(np.int64), split)


def load_cifar10(bin_paths: Sequence, split: str = "train") -> Dataset:
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in bin_paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE))
    if not images:
        raise DataFormatError("No CIFAR-10 batch files given")
    pixels = np.concatenate(images)
    logging.info(f"Loaded CIFAR-10 {split} set: {pixels.shape[0]} images from {len(images)} files")
    return Dataset(pixels.astype(np.float64) / 255.0, np.concatenate(labels), split)


def load_dataset(name: str, data_dir, split: str) -> Dataset:
    """Finds the standard file names for ``name`` under ``data_dir``."""
    data_dir = Path(data_dir)
    if name == constants.DATASET_MNIST:
        images, labels = MNIST_FILES[split]
        return load_idx(data_dir / images, data_dir / labels, split)
    if name == constants.DATASET_CIFAR10:
        base = data_dir / "cifar-10-batches-bin" if (data_dir / "cifar-10-batches-bin").is_dir() else data_dir
        return load_cifar10([base / f for f in CIFAR_FILES[split]], split)
    raise ValueError(f"Unknown dataset '{name}'")


def channel_stats(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = dataset.images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def standardize(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    images = (dataset.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(dataset, images=images)


def subset(dataset: Dataset, n: int, rng: Rng) -> Dataset:
    if n > len(dataset):
        raise SubsetSizeError(f"Requested {n} samples from a dataset of {len(dataset)}")
    if n == len(dataset):
        return dataset
    return dataset.take(np.sort(rng_permutation(rng, len(dataset))[:n]))


class MiniBatchSampler:
    """Seeded epoch permutations cut into fixed-size batches; the short tail batch is dropped."""

    def __init__(self, dataset: Dataset, batch_size: int, rng: Rng, drop_last: bool = True):
        if batch_size < 1:
            raise ValueError(f"Batch size must be >= 1, got {batch_size}")
        if drop_last and batch_size > len(dataset):
            raise SubsetSizeError(f"Batch size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        self.drop_last = drop_last
        self._pending: Iterator[np.ndarray] = iter(())

    @property
    def batches_per_epoch(self) -> int:
        full, rest = divmod(len(self.dataset), self.batch_size)
        return full if self.drop_last or rest == 0 else full + 1

    def epoch_indices(self) -> List[np.ndarray]:
        order = rng_permutation(self.rng, len(self.dataset))
        return [order[i * self.batch_size:(i + 1) * self.batch_size] for i in range(self.batches_per_epoch)]

    def epoch(self) -> Iterator[Tuple[Tensor, np.ndarray]]:
        for indices in self.epoch_indices():
            yield self.dataset.images[indices], self.dataset.labels[indices]

    def next_batch(self) -> Tuple[Tensor, np.ndarray]:
        indices = next(self._pending, None)
        if indices is None:
            self._pending = iter(self.epoch_indices())
            indices = next(self._pending)
        return self.dataset.images[indices], self.dataset.labels[indices]


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Writes uint8 images (M x H x W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def write_cifar10(path, images: np.ndarray, labels: np.ndarray):
    """Writes uint8 images (M x 3 x 32 x 32) and labels as CIFAR-10 binary records."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Path(path).write_bytes(records.tobytes())


def load_split_pair(name: str, data_dir, train_subset: Optional[int], test_subset: Optional[int],
                    rng: Rng, normalize: bool = True) -> Tuple[Dataset, Dataset]:
    """Train/test datasets after subsetting and optional per-channel standardization (train statistics)."""
    train = load_dataset(name, data_dir, "train")
    test = load_dataset(name, data_dir, "test")
    if train_subset:
        train = subset(train, train_subset, rng.child(0))
    if test_subset:
        test = subset(test, test_subset, rng.child(1))
    if normalize:
        mean, std = channel_stats(train)
        train, test = standardize(train, mean, std), standardize(test, mean, std)
    return train, test
