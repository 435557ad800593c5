"""MNIST IDX reading and conversion to binary array inputs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (N, 28, 28) uint8
    labels: np.ndarray   # (N,) uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, limit: int | None = None, start: int = 0) -> "Dataset":
        stop = None if limit is None else start + limit
        return Dataset(self.images[start:stop], self.labels[start:stop])


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    head = 4 + 4 * ndim
    if len(raw) >= 4:
        (m,) = struct.unpack(">I", raw[:4])
        if m != magic:
            raise IDXError(f"{what}: magic {m}, expected {magic}")
    if len(raw) < head:
        raise IDXError(f"{what}: file too short for an IDX header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head != n:
        raise IDXError(f"{what}: header promises {n} bytes of data, file has {len(raw) - head}")
    return np.frombuffer(raw, np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an image/label IDX pair (plain or gzipped)."""
    images = _parse(_read(images_path), IMAGE_MAGIC, 3, str(images_path))
    labels = _parse(_read(labels_path), LABEL_MAGIC, 1, str(labels_path))
    if len(images) != len(labels):
        raise IDXError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise IDXError(f"{labels_path}: label {labels.max()} out of range")
    return Dataset(images, labels)


def find_mnist_dir(explicit=None) -> Path:
    """First directory holding the test files: explicit, $PPA_MNIST_DIR, ./data/mnist, ~/data/mnist."""
    cands = [explicit, os.environ.get("PPA_MNIST_DIR"), Path.cwd() / "data" / "mnist",
             Path.home() / "data" / "mnist"]
    for c in cands:
        if c is None:
            continue
        c = Path(c)
        if _resolve(c, FILES["test"][0]) is not None:
            return c
    raise FileNotFoundError("MNIST not found; pass --mnist-dir or set PPA_MNIST_DIR")


def _resolve(d: Path, name: str):
    for n in (name, name + ".gz"):
        if (d / n).is_file():
            return d / n
    return None


def load_split(split: str = "test", mnist_dir=None) -> Dataset:
    d = find_mnist_dir(mnist_dir)
    img, lab = (_resolve(d, n) for n in FILES[split])
    if img is None or lab is None:
        raise FileNotFoundError(f"{split} files missing in {d}")
    return load_idx(img, lab)


def upscale_index(src: int, dst: int) -> np.ndarray:
    """Nearest-neighbour source index for each destination pixel."""
    return (np.arange(dst) * src) // dst


def preprocess(images, side: int, threshold: int = 128) -> np.ndarray:
    """Upscale (N, 28, 28) or (28, 28) bytes to side x side and binarize (>= threshold)."""
    a = np.asarray(images)
    single = a.ndim == 2
    if single:
        a = a[None]
    idx_y = upscale_index(a.shape[1], side)
    idx_x = upscale_index(a.shape[2], side)
    out = (a[:, idx_y][:, :, idx_x] >= threshold).astype(np.uint8)
    return out[0] if single else out
