"""Dataset loading (CIFAR-10 binary, MNIST IDX), a synthetic generator, augmentation and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .tensor import Tensor

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images [N, C, H, W] in [0, 1] (float32) and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, count: int | None) -> Dataset:
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], self.class_count, self.split, self.name)


@dataclass
class Batch:
    x: Tensor
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar_binary(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch file into (images [N,3,32,32] in [0,1], labels)."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"missing CIFAR-10 file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record at byte offset {whole * CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"{path}: label byte {labels[i]} > 9 in record {i} (offset {i * CIFAR_RECORD})")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def write_cifar_binary(path: str | Path, dataset: Dataset) -> None:
    """Encode a 3x32x32 dataset as CIFAR-10 binary records (pixels rounded to bytes)."""
    if dataset.image_shape != (3, 32, 32):
        raise DataFormatError(f"CIFAR records hold 3x32x32 images, got {dataset.image_shape}")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10_binary(dir_path: str | Path, train_count: int | None = None,
                        test_count: int | None = None) -> tuple[Dataset, Dataset]:
    root = Path(dir_path)
    if not root.is_dir():
        raise DataFormatError(f"CIFAR-10 directory not found: {root}")
    parts = [read_cifar_binary(root / name) for name in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10,
                    "train", "cifar10")
    test = Dataset(*read_cifar_binary(root / CIFAR_TEST_FILE), 10, "test", "cifar10")
    return train.subset(train_count), test.subset(test_count)


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_idx(path: Path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    if not path.is_file():
        raise DataFormatError(f"missing IDX file: {path}")
    raw = path.read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise DataFormatError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    return dims, payload[:expected]


def load_mnist_idx(image_path: str | Path, label_path: str | Path, split: str = "train") -> Dataset:
    (n, rows, cols), pix = _read_idx(Path(image_path), IDX_IMAGES_MAGIC, 3)
    (n_labels,), lab = _read_idx(Path(label_path), IDX_LABELS_MAGIC, 1)
    if n != n_labels:
        raise DataFormatError(f"image count {n} does not match label count {n_labels}")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, 10, split, "mnist")


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(n_per_class: int, classes: int, size: int, seed: int, noise: float = 0.1,
                  channels: int = 3, split: str = "train") -> Dataset:
    """Class-conditional oriented sinusoid gratings plus Gaussian noise, clipped to [0, 1].

    Class c uses a fixed orientation, spatial frequency and per-channel phase
    that depend only on (c, classes); the seed drives a per-image random
    phase shift and the noise.  With ``noise=0`` both are disabled, so all
    images of a class coincide.
    """
    if not 1 <= classes <= 16:
        raise ConfigurationError(f"synthetic classes must lie in [1, 16], got {classes}")
    if size < 8:
        raise ConfigurationError(f"synthetic image size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((classes * n_per_class, channels, size, size), dtype=np.float64)
    labels = np.repeat(np.arange(classes), n_per_class)
    for c in range(classes):
        angle = np.pi * c / classes
        freq = (2 + c % 3) * 2 * np.pi / size
        proj = (np.cos(angle) * xx + np.sin(angle) * yy) * freq
        chan_phase = 2 * np.pi * np.arange(channels) * (c + 1) / (channels * classes + 1)
        shifts = rng.uniform(0, 2 * np.pi, n_per_class) if noise > 0 else np.zeros(n_per_class)
        block = 0.5 + 0.4 * np.sin(proj[None, None] + chan_phase[None, :, None, None]
                                   + shifts[:, None, None, None])
        images[c * n_per_class:(c + 1) * n_per_class] = block
    if noise > 0:
        images += rng.normal(0.0, noise, images.shape)
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(images[order].astype(np.float32), labels[order], classes, split, "synthetic")


# ---------------------------------------------------------------------------
# preprocessing


def augment(batch: Batch, pad: int = 4, flip: bool = True, seed: int | np.random.Generator = 0) -> Batch:
    """Reflect-pad, random-crop back to size, and optionally flip horizontally with p=0.5."""
    if pad < 0:
        raise ConfigurationError("pad must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = batch.x.data
    n, c, h, w = x.shape
    out = x
    if pad:
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        dy = rng.integers(0, 2 * pad + 1, n)
        dx = rng.integers(0, 2 * pad + 1, n)
        out = np.empty_like(x)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    if flip:
        mask = rng.random(n) < 0.5
        if mask.any():
            out = out.copy() if out is x else out
            out[mask] = out[mask][..., ::-1]
    return Batch(Tensor(out, dtype=x.dtype), batch.y)


def _channel_vector(values, channels: int, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 1:
        v = np.repeat(v, channels)
    if v.size != channels:
        raise ConfigurationError(f"{name} needs {channels} entries, got {v.size}")
    return v


def normalize(batch: Batch, mean, std) -> Batch:
    x = batch.x.data
    c = x.shape[1]
    m = _channel_vector(mean, c, "mean")
    s = _channel_vector(std, c, "std")
    if np.any(s <= 0):
        raise ConfigurationError("std components must be positive")
    out = (x - m[None, :, None, None]) / s[None, :, None, None]
    return Batch(Tensor(out.astype(x.dtype), dtype=x.dtype), batch.y)


def denormalize(batch: Batch, mean, std) -> Batch:
    x = batch.x.data
    c = x.shape[1]
    m = _channel_vector(mean, c, "mean")
    s = _channel_vector(std, c, "std")
    out = x * s[None, :, None, None] + m[None, :, None, None]
    return Batch(Tensor(out.astype(x.dtype), dtype=x.dtype), batch.y)


def channel_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    imgs = dataset.images.astype(np.float64)
    mean = imgs.mean(axis=(0, 2, 3))
    std = imgs.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def write_norm_sidecar(path: str | Path, mean, std) -> None:
    lines = [f"mean_{i}= {float(m)!r}" for i, m in enumerate(mean)]
    lines += [f"std_{i}= {float(s)!r}" for i, s in enumerate(std)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_norm_sidecar(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    means: dict[int, float] = {}
    stds: dict[int, float] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kind, _, idx = key.strip().partition("_")
        target = {"mean": means, "std": stds}.get(kind)
        if target is None or not idx.isdigit():
            raise DataFormatError(f"{path}: bad normalisation line {line!r}")
        target[int(idx)] = float(value)
    if sorted(means) != list(range(len(means))) or sorted(stds) != sorted(means):
        raise DataFormatError(f"{path}: incomplete channel statistics")
    return (np.array([means[i] for i in range(len(means))]),
            np.array([stds[i] for i in range(len(stds))]))


def batch_iter(dataset: Dataset, batch_size: int, shuffle: bool = False,
               seed: int | np.random.Generator = 0) -> Iterator[Batch]:
    """Yield batches covering each sample once; the last batch may be short."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise DataFormatError("cannot iterate an empty dataset")
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(len(dataset))
    else:
        order = np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(Tensor(dataset.images[idx], dtype=np.float32), dataset.labels[idx])
