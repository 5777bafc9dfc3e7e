"""MNIST (IDX) and CIFAR-10 (binary batch) loaders, label noise and batching.

Pixels are scaled to [0, 1] and nothing else; no per-channel standardisation,
so attack budgets stay in absolute pixel units.
"""

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ConsistencyError, ContractError, FormatError, LabelError, LengthError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 3073
GZIP_MAGIC = b"\x1f\x8b"

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
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "MNIST"
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def take(self, n):
        """First ``n`` examples (all of them when ``n`` is None or too large)."""
        if n is None or n >= len(self):
            return self
        return replace(self, images=self.images[:n], labels=self.labels[:n])


@dataclass(frozen=True)
class NoiseSpec:
    rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise ConfigError(f"noise rate must lie in [0, 1], got {self.rate}")


def _read_maybe_gzip(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_MAGIC:
        return gzip.decompress(raw)
    return raw


def parse_idx_images(raw):
    if len(raw) < 16:
        raise LengthError("IDX image file shorter than its 16-byte header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"IDX image magic is {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise LengthError(f"IDX image file has {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)


def parse_idx_labels(raw):
    if len(raw) < 8:
        raise LengthError("IDX label file shorter than its 8-byte header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"IDX label magic is {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if len(raw) != 8 + n:
        raise LengthError(f"IDX label file has {len(raw)} bytes, header implies {8 + n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def _infer_split(path, test_marker):
    return "test" if test_marker in os.path.basename(os.fspath(path)) else "train"


def load_mnist(image_path, label_path, split=None):
    """Read an IDX image/label pair (raw or gzip-compressed)."""
    pixels = parse_idx_images(_read_maybe_gzip(image_path))
    labels = parse_idx_labels(_read_maybe_gzip(label_path))
    if len(pixels) != len(labels):
        raise ConsistencyError(f"{len(pixels)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise LabelError("MNIST label above 9")
    split = split or _infer_split(image_path, "t10k")
    return Dataset(pixels / 255.0, labels.astype(np.int64), "MNIST", split)


def parse_cifar10(raw):
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-10 batch of {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.size and labels.max() > 9:
        raise LabelError("CIFAR-10 label byte above 9")
    # 1024 red, 1024 green, 1024 blue, each row-major 32x32
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(batch_paths, split=None):
    """Concatenate one or more CIFAR-10 binary batch files."""
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    pixels, labels = [], []
    for path in batch_paths:
        p, l = parse_cifar10(_read_maybe_gzip(path))
        pixels.append(p)
        labels.append(l)
    if not pixels:
        raise ContractError("no CIFAR-10 batch files given")
    split = split or _infer_split(batch_paths[0], "test_batch")
    return Dataset(np.concatenate(pixels) / 255.0, np.concatenate(labels).astype(np.int64), "CIFAR10", split)


def _to_bytes(images):
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def dump_mnist(dataset):
    """Re-serialise to raw IDX bytes: ``(image_bytes, label_bytes)``."""
    n, _, rows, cols = dataset.images.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + _to_bytes(dataset.images).tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return img, lab


def dump_cifar10(dataset):
    """Re-serialise to the 3073-byte-record binary layout."""
    n = len(dataset)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels.astype(np.uint8)
    rec[:, 1:] = _to_bytes(dataset.images).reshape(n, -1)
    return rec.tobytes()


def _find(directory, name):
    for candidate in (name, name + ".gz", os.path.join("cifar-10-batches-bin", name)):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{name} not found under {directory}")


def dataset_files(name, directory, split):
    name = name.upper().replace("-", "")
    if name == "MNIST":
        return [_find(directory, f) for f in MNIST_FILES[split]]
    if name == "CIFAR10":
        return [_find(directory, f) for f in CIFAR_FILES[split]]
    raise ConfigError(f"unknown dataset {name!r}; expected MNIST or CIFAR10")


def load_dataset(name, directory, split):
    """Load ``split`` of a dataset from its standard file names inside ``directory``."""
    files = dataset_files(name, directory, split)
    if name.upper().replace("-", "") == "MNIST":
        return load_mnist(*files, split=split)
    return load_cifar10(files, split=split)


def inject_label_noise(dataset, spec):
    """Symmetric label noise: each label moves, with probability ``spec.rate``,
    to a class drawn uniformly from the other ``C - 1``.

    Returns the noisy dataset and the boolean mask of flipped examples.
    """
    if dataset.split != "train":
        raise ContractError("label noise may only be injected into a train split")
    rng = np.random.default_rng(spec.seed)
    n, C = len(dataset), dataset.num_classes
    flip = rng.random(n) < spec.rate
    shift = rng.integers(1, C, size=n)
    labels = np.where(flip, (dataset.labels + shift) % C, dataset.labels)
    return replace(dataset, labels=labels.astype(np.int64)), flip


def batch_iter(dataset, batch_size, shuffle_seed=0, epoch=0):
    """Yield ``(images, labels)`` over one seeded permutation of the dataset."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(dataset))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
