"""Datasets and device partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

BUNDLED_MNIST = Path(__file__).parent / "mnist"


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # [M, C_in, H, W] in [0, 1]
    labels: np.ndarray  # [M] int64
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise ValueError("dataset needs >= 1 sample and one label per image")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise FormatError("truncated IDX image header", len(raw))
    magic, m, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IMAGES_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", 0)
    need = 16 + m * rows * cols
    if len(raw) < need:
        raise FormatError(f"IDX image payload short: need {need} bytes, have {len(raw)}", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=m * rows * cols, offset=16)
    return pixels.reshape(m, 1, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError("truncated IDX label header", len(raw))
    magic, m = struct.unpack_from(">II", raw, 0)
    if magic != LABELS_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{magic:08x}", 0)
    if len(raw) < 8 + m:
        raise FormatError(f"IDX label payload short: need {8 + m} bytes, have {len(raw)}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=m, offset=8).astype(np.int64)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair. Gzipped files are accepted transparently."""
    images = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    if labels.size and labels.max() > 9:
        raise FormatError("MNIST label above 9", 8 + int(np.argmax(labels > 9)))
    return Dataset(images, labels, 10)


def load_mnist(split: str = "train", root=None) -> Dataset:
    root = Path(root) if root else BUNDLED_MNIST
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return load_mnist_idx(img, lab)
    raise FileNotFoundError(f"no {prefix} IDX files under {root}")


def synth_blobs(num_classes: int = 10, per_class: int = 50, noise_sigma: float = 0.2,
                seed: int = 0, size: int = 12) -> Dataset:
    """Noisy copies of fixed per-class binary templates, clipped to [0, 1].

    Templates come from a fixed generator so different seeds give different
    samples of the same task.
    """
    templates = (np.random.default_rng(12345).random((num_classes, size, size)) < 0.3).astype(float)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(labels.size)]
    images = templates[labels] + rng.normal(0.0, noise_sigma, (labels.size, size, size))
    return Dataset(np.clip(images, 0.0, 1.0)[:, None], labels.astype(np.int64), num_classes)


def partition_iid(m: int, num_devices: int, seed: int = 0) -> list[np.ndarray]:
    if num_devices < 1 or m < num_devices:
        raise ValueError(f"cannot split {m} samples over {num_devices} devices")
    perm = np.random.default_rng(seed).permutation(m)
    return [np.sort(p) for p in np.array_split(perm, num_devices)]


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(labels, num_devices: int, beta: float = 0.5, seed: int = 0) -> list[np.ndarray]:
    """Label-skewed split: per class, device shares ~ Dirichlet(beta)."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    labels = np.asarray(labels)
    if num_devices < 1 or labels.size < num_devices:
        raise ValueError(f"cannot split {labels.size} samples over {num_devices} devices")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(num_devices)]
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        props = rng.dirichlet(np.full(num_devices, beta))
        counts = _largest_remainder(props, idx.size)
        for dev, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            shards[dev].extend(chunk.tolist())
    for dev in range(num_devices):
        if not shards[dev]:
            donor = max(range(num_devices), key=lambda d: (len(shards[d]), -d))
            shards[dev].append(shards[donor].pop())
    return [np.sort(np.array(s, dtype=np.int64)) for s in shards]
