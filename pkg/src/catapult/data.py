"""Datasets: synthetic Gaussian sets, the IDX image/label container, and a
bundled small-digits fallback used when no MNIST files are available.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .numerics import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "CATAPULT_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.X.shape[0] < 1 or self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")

    def __len__(self):
        return self.X.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Y, axis=1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx], self.split)


def one_hot(labels: np.ndarray, k: int, smoothing: float = 0.0) -> np.ndarray:
    """One-hot rows; ``smoothing`` is subtracted from the hot entry."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0 - smoothing
    return out


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def gen_gaussian(rng: np.random.Generator, n: int, d: int, k: Optional[int] = None) -> Dataset:
    """Rows i.i.d. ``N(0, I/d)`` with balanced labels.

    With ``k`` given the targets are one-hot over ``k`` classes; otherwise
    they are scalar regression labels ``+-1`` (shape ``n x 1``).
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    X = rng.standard_normal((n, d)) / np.sqrt(d)
    if k is None:
        Y = (2.0 * _balanced_labels(rng, n, 2) - 1.0)[:, None]
    else:
        Y = one_hot(_balanced_labels(rng, n, k), k)
    return Dataset(X, Y)


def gen_gaussian_mixture(rng: np.random.Generator, n: int, d: int, k: int,
                         sep: float = 1.0, noise: float = 2.0) -> Dataset:
    """Class-conditional Gaussians: ``x = mu_c + noise * z / sqrt(d)``, ``mu_c ~ N(0, sep^2 I/d)``.

    The class means are drawn first, so two calls with equal seeds but
    different ``n`` share the same task.
    """
    means = rng.standard_normal((k, d)) * (sep / np.sqrt(d))
    labels = _balanced_labels(rng, n, k)
    X = means[labels] + noise * rng.standard_normal((n, d)) / np.sqrt(d)
    return Dataset(X, one_hot(labels, k))


def warmup_instance() -> Dataset:
    """The single sample ``x = 1, y = 0``."""
    return Dataset(np.ones((1, 1)), np.zeros((1, 1)))


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: missing header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFile(f"{path}: {len(raw) - header} payload bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def balanced_subset(labels: np.ndarray, size: int, k: int, seed: int) -> np.ndarray:
    """Indices of a class-balanced subset: ``size // k`` per class, the first
    ``size % k`` classes (in a seeded order) get one extra. Returned shuffled.
    """
    rng = make_rng(seed)
    base, extra = divmod(size, k)
    bonus = set(rng.permutation(k)[:extra].tolist())
    picked = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        want = base + (1 if c in bonus else 0)
        if members.size < want:
            raise ValueError(f"class {c} has {members.size} samples, need {want}")
        picked.append(rng.permutation(members)[:want])
    return rng.permutation(np.concatenate(picked))


def load_idx(images_path, labels_path, subset_size: Optional[int] = None, seed: int = 0,
             k: int = 10, scale: float = 1.0 / 255.0, split: str = "train") -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise TruncatedFile(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= k:
        raise LabelOutOfRange(f"label {labels.max()} outside [0, {k})")
    X = images.reshape(images.shape[0], -1).astype(np.float64) * scale
    data = Dataset(X, one_hot(labels, k), split)
    if subset_size is not None:
        data = data.subset(balanced_subset(labels, subset_size, k, seed))
    return data


def find_mnist(data_dir=None) -> Optional[dict]:
    """Locate MNIST IDX files (optionally gzipped) under ``data_dir`` or ``$CATAPULT_DATA_DIR``."""
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        return None
    found = {}
    for split, names in MNIST_FILES.items():
        paths = []
        for name in names:
            for cand in (Path(data_dir) / name, Path(data_dir) / (name + ".gz")):
                if cand.exists():
                    paths.append(cand)
                    break
        if len(paths) != 2:
            return None
        found[split] = tuple(paths)
    return found


def load_digits_split(n_train: int = 512, seed: int = 0,
                      classes: Optional[Sequence[int]] = None) -> Tuple[Dataset, Dataset]:
    """The 8x8 handwritten-digit set bundled with scikit-learn, pixels scaled to [0, 1].

    A class-balanced training subset of ``n_train`` samples; every remaining
    sample of the selected classes is the test set.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    X = raw.data / 16.0
    labels = raw.target.astype(np.int64)
    if classes is not None:
        keep = np.isin(labels, classes)
        X, labels = X[keep], np.searchsorted(np.asarray(sorted(classes)), labels[keep])
    k = int(labels.max()) + 1
    train_idx = balanced_subset(labels, n_train, k, seed)
    test_mask = np.ones(labels.shape[0], dtype=bool)
    test_mask[train_idx] = False
    Y = one_hot(labels, k)
    return Dataset(X[train_idx], Y[train_idx], "train"), Dataset(X[test_mask], Y[test_mask], "test")


def image_classification_split(n_train: int = 512, seed: int = 0, data_dir=None,
                               classes: Optional[Sequence[int]] = None
                               ) -> Tuple[Dataset, Dataset, str]:
    """MNIST when its IDX files can be found, else the bundled digits set.

    Returns ``(train, test, source_name)``.
    """
    paths = find_mnist(data_dir)
    if paths is None:
        train, test = load_digits_split(n_train, seed, classes)
        return train, test, "sklearn-digits"
    train = load_idx(*paths["train"])
    test = load_idx(*paths["test"], split="test")
    if classes is not None:
        train = _restrict(train, classes)
        test = _restrict(test, classes)
    idx = balanced_subset(train.labels, n_train, train.Y.shape[1], seed)
    return train.subset(idx), test, "mnist"


def center_features(train: Dataset, test: Dataset) -> Tuple[Dataset, Dataset]:
    """Subtract the training-set feature mean from both splits."""
    mu = train.X.mean(axis=0)
    return (Dataset(train.X - mu, train.Y, train.split), Dataset(test.X - mu, test.Y, test.split))


def _restrict(data: Dataset, classes: Sequence[int]) -> Dataset:
    classes = sorted(classes)
    keep = np.isin(data.labels, classes)
    labels = np.searchsorted(np.asarray(classes), data.labels[keep])
    return Dataset(data.X[keep], one_hot(labels, len(classes)), data.split)
