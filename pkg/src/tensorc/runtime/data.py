"""Datasets: MNIST IDX files and seeded synthetic Gaussian blobs."""

from __future__ import annotations

import gzip
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .snapshot import FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DimensionMismatch(FormatError):
    """Loaded images do not have the declared per-sample shape."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1] for IDX data
    labels: np.ndarray  # (N,) int64
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, i: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch ``i`` of a cyclic pass: samples ``i*size .. i*size+size-1`` mod N."""
        idx = (np.arange(size) + i * size) % len(self)
        return self.images[idx], self.labels[idx]


def _open(path: str):
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path += ".gz"
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb"), path


def read_idx(path: str) -> np.ndarray:
    f, real = _open(path)
    with f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(real, "truncated IDX header")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(real, f"bad IDX magic 0x{magic:08x}")
    rank = magic & 0xFF
    dims = struct.unpack_from(f">{rank}I", raw, 4)
    start = 4 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - start != n:
        raise FormatError(real, f"payload has {len(raw) - start} bytes, header declares {n}")
    return np.frombuffer(raw, np.uint8, n, start).reshape(dims)


def load_idx(images_path: str, labels_path: str, classes: int, shape: tuple | None = None,
             limit: int | None = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise FormatError(images_path, f"images {images.shape} and labels {labels.shape} do not pair up")
    x = (images.astype(np.float32) / 255.0)[:, None]
    if shape is not None and tuple(x.shape[1:]) != tuple(shape):
        raise DimensionMismatch(images_path, f"samples are {x.shape[1:]}, the network declares {tuple(shape)}")
    if labels.size and labels.max() >= classes:
        raise FormatError(labels_path, f"label {int(labels.max())} is not below {classes} classes")
    if limit:
        x, labels = x[:limit], labels[:limit]
    return Dataset(x, labels, classes)


def synth_data(seed: int, n: int, shape: tuple, classes: int, sigma: float = 0.1, draw: int = 1) -> Dataset:
    """``classes`` Gaussian blobs around seeded centers in [0, 1]^shape.

    Centers are drawn once per seed; samples add N(0, sigma^2) noise.  At
    sigma = 0.1 the classes are linearly separable for image-sized inputs.
    ``draw`` selects an independent sample set around the same centers.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    centers = rng.random((classes,) + tuple(shape)).astype(np.float32)
    srng = np.random.default_rng(np.random.SeedSequence([seed, draw, n]))
    labels = srng.integers(0, classes, n)
    noise = srng.standard_normal((n,) + tuple(shape)).astype(np.float32)
    return Dataset(centers[labels] + np.float32(sigma) * noise, labels.astype(np.int64), classes)


def mnist_dir() -> str | None:
    d = os.environ.get("TENSORC_MNIST_DIR") or os.path.expanduser("~/.tensorc/mnist")
    train = os.path.join(d, MNIST_FILES["train"][0])
    return d if os.path.exists(train) or os.path.exists(train + ".gz") else None


def open_source(source: str, shape: tuple, classes: int, limit: int | None = None,
                split: str = "train") -> Dataset:
    """Resolve a data source string.

    * ``synthetic:SEED``: Gaussian blobs (the test split uses another draw);
    * ``mnist``: IDX files under ``$TENSORC_MNIST_DIR`` (or ``~/.tensorc/mnist``),
      falling back to ``synthetic:0`` with a warning when they are absent;
    * a directory holding the four MNIST IDX files.
    """
    if source.startswith("synthetic"):
        _, _, seed = source.partition(":")
        seed = int(seed or 0)
        n = limit or 5000
        if split == "test":
            return synth_data(seed, max(n // 5, 1000), shape, classes, draw=2)
        return synth_data(seed, n, shape, classes)
    directory = source
    if source == "mnist":
        directory = mnist_dir()
        if directory is None:
            warnings.warn("MNIST files not found (set TENSORC_MNIST_DIR); using synthetic:0 data", stacklevel=2)
            return open_source("synthetic:0", shape, classes, limit, split)
    img, lab = MNIST_FILES[split]
    return load_idx(os.path.join(directory, img), os.path.join(directory, lab), classes, shape,
                    limit if split == "train" else None)
