"""Datasets: the ``TCPD`` container, a synthetic generator and batching.

``TCPD`` layout (little-endian, no padding)::

    magic "TCPD" | u32 version=1 | u32 S | u16 H | u16 W | u8 C | u16 num_classes
    S*H*W*C float64 pixels (row-major, sample-major) | S x u16 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import formats
from .backbone import ModelConfig
from .rng import Stream, derive_seed

DATA_MAGIC = b"TCPD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sIIHHBH")


class ValueRangeError(formats.FormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [S, H, W, C] in [0, 1]
    labels: np.ndarray  # [S] int
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"inconsistent dataset extents {self.images.shape} / {self.labels.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def check_config(self, config: ModelConfig) -> None:
        expect = (config.image_h, config.image_w, config.channels)
        if self.images.shape[1:] != expect:
            raise ValueError(f"dataset images are {self.images.shape[1:]}, model expects {expect}")


def encode_dataset(ds: Dataset) -> bytes:
    s, h, w, c = ds.images.shape
    header = _HEADER.pack(DATA_MAGIC, DATA_VERSION, s, h, w, c, ds.num_classes)
    return b"".join([
        header,
        np.ascontiguousarray(ds.images, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.labels, dtype="<u2").tobytes(),
    ])


def decode_dataset(buf: bytes, split: str = "train") -> Dataset:
    if len(buf) < 4 or buf[:4] != DATA_MAGIC:
        raise formats.MagicError(f"bad magic {buf[:4]!r}, expected {DATA_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise formats.TruncationError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, s, h, w, c, k = _HEADER.unpack_from(buf)
    if version != DATA_VERSION:
        raise formats.VersionError(f"unsupported version {version}, expected {DATA_VERSION}")
    n_pix = s * h * w * c
    need = _HEADER.size + 8 * n_pix + 2 * s
    if len(buf) < _HEADER.size + 8 * n_pix:
        raise formats.TruncationError(f"image payload truncated: file has {len(buf)} bytes, need {need}")
    if len(buf) < need:
        raise formats.TruncationError(f"label payload truncated: file has {len(buf)} bytes, need {need}")
    if len(buf) > need:
        raise formats.ShapeTableError(f"{len(buf) - need} trailing bytes after {s} samples")
    off = _HEADER.size
    images = np.frombuffer(buf, dtype="<f8", count=n_pix, offset=off).astype(np.float64).reshape(s, h, w, c)
    labels = np.frombuffer(buf, dtype="<u2", count=s, offset=off + 8 * n_pix).astype(np.int64)
    if s and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise formats.LabelRangeError(f"sample {bad} has label {labels[bad]} >= num_classes {k}")
    if images.size and not (np.all(np.isfinite(images)) and images.min() >= 0.0 and images.max() <= 1.0):
        raise ValueRangeError("image values must lie in [0, 1]")
    return Dataset(images, labels, k, split)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path: str | Path, split: str = "train") -> Dataset:
    return decode_dataset(Path(path).read_bytes(), split)


def class_templates(classes: int, seed: int, config: ModelConfig) -> np.ndarray:
    """Per-class images ``[classes, H, W, C]`` that are constant over each patch.

    Every patch of every class gets its own colour, drawn uniformly from
    ``[0.2, 0.8]`` per channel, so noisy samples stay inside ``[0, 1]``.
    """
    s = Stream(derive_seed(seed, 0x7E39))
    gh, gw = config.image_h // config.patch_h, config.image_w // config.patch_w
    means = 0.2 + 0.6 * s.uniform(classes * gh * gw * config.channels)
    means = means.reshape(classes, gh, 1, gw, 1, config.channels)
    full = np.broadcast_to(means, (classes, gh, config.patch_h, gw, config.patch_w, config.channels))
    return full.reshape(classes, config.image_h, config.image_w, config.channels).copy()


def gen_synthetic(
    classes: int = 4,
    samples_per_class: int = 64,
    noise_std: float = 0.05,
    seed: int = 7,
    config: ModelConfig | None = None,
) -> Dataset:
    """Template-plus-Gaussian-noise images clipped to [0, 1], class-major order."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if samples_per_class < 1:
        raise ValueError("need at least one sample per class")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    config = config or ModelConfig()
    templates = class_templates(classes, seed, config)
    s = Stream(derive_seed(seed, 0x401C))
    shape = (classes, samples_per_class) + templates.shape[1:]
    noise = s.normal(int(np.prod(shape))).reshape(shape) * noise_std
    images = np.clip(templates[:, None] + noise, 0.0, 1.0).reshape((-1,) + templates.shape[1:])
    labels = np.repeat(np.arange(classes), samples_per_class)
    return Dataset(images, labels, classes)


def nearest_template(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Index of the closest template (squared L2) for each image."""
    x = images.reshape(len(images), -1)
    t = templates.reshape(len(templates), -1)
    d = (x * x).sum(1)[:, None] - 2.0 * x @ t.T + (t * t).sum(1)[None, :]
    return np.argmin(d, axis=1)


def batch_iter(dataset: Dataset | int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Index batches from a permutation fixed by ``(seed, epoch)``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, int) else len(dataset)
    perm = Stream(derive_seed(seed, epoch, 0xBA7C)).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]
