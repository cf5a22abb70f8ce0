"""CIFAR binary batches to pooled, channel-standardized feature matrices."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import FormatError

RECORD_BYTES = 3073
IMAGE_SIDE = 32
CHANNELS = 3
POOL = 4
FEATURES = CHANNELS * (IMAGE_SIDE // POOL) ** 2  # 192


@dataclass(frozen=True)
class ImageRecord:
    label: int
    pixels: bytes  # 1024 red, 1024 green, 1024 blue, row-major 32x32

    def array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(CHANNELS, IMAGE_SIDE, IMAGE_SIDE)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def parse_cifar_bytes(raw: bytes, source: str = "<bytes>") -> List[ImageRecord]:
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{source}: length {len(raw)} is not a multiple of {RECORD_BYTES} (truncated file?)")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = buf[:, 0]
    if labels.size and labels.max() > 9:
        r = int(np.argmax(labels > 9))
        raise FormatError(f"{source}: record {r} has label byte {int(labels[r])} > 9")
    return [ImageRecord(int(lab), row[1:].tobytes()) for lab, row in zip(labels, buf)]


def read_cifar_binary(path) -> List[ImageRecord]:
    """Records of a CIFAR binary batch file, in file order."""
    path = Path(path)
    return parse_cifar_bytes(path.read_bytes(), str(path))


def pool_images(records: Sequence[ImageRecord], scale: float = 255.0) -> np.ndarray:
    """``(m, 3, 8, 8)`` array of 4x4 block means of ``pixels / scale``."""
    if not records:
        raise ValueError("no records to pool")
    imgs = np.stack([r.array() for r in records]).astype(float) / scale
    m = imgs.shape[0]
    s = IMAGE_SIDE // POOL
    return imgs.reshape(m, CHANNELS, s, POOL, s, POOL).mean(axis=(3, 5))


def channel_stats(pooled: np.ndarray) -> ChannelStats:
    """One mean and one (population) std per channel over all images and positions."""
    mean = pooled.mean(axis=(0, 2, 3))
    std = pooled.std(axis=(0, 2, 3))
    return ChannelStats(mean, std)


def pool_and_standardize(records: Sequence[ImageRecord], stats: Optional[ChannelStats] = None,
                         scale: float = 255.0):
    """Pool, then standardize each channel; returns ``(X (m, 192), labels, stats)``.

    Statistics come from ``records`` unless supplied (test partitions reuse
    the training statistics).  Features are flattened channel-major.
    """
    pooled = pool_images(records, scale)
    if stats is None:
        stats = channel_stats(pooled)
    if np.any(stats.std <= 0) or not np.all(np.isfinite(stats.std)):
        raise ValueError(f"zero channel variance, cannot standardize (std={stats.std.tolist()})")
    Z = (pooled - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    labels = np.array([r.label for r in records], dtype=int)
    return Z.reshape(Z.shape[0], FEATURES), labels, stats


def binary_subset(records: Sequence[ImageRecord], class_a: int, class_b: int) -> List[ImageRecord]:
    """Records of the two classes, in original order, relabelled ``a -> 0``, ``b -> 1``."""
    if class_a == class_b:
        raise ValueError("identical classes")
    out = [ImageRecord(0 if r.label == class_a else 1, r.pixels)
           for r in records if r.label in (class_a, class_b)]
    if not out:
        raise ValueError(f"no records with labels {class_a} or {class_b}")
    return out


def load_batches(paths: Sequence) -> List[ImageRecord]:
    recs: List[ImageRecord] = []
    for p in paths:
        recs.extend(read_cifar_binary(p))
    return recs


def find_cifar10(root) -> tuple:
    """``(train files, test files)`` of a ``cifar-10-batches-bin`` style directory."""
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train = sorted(root.glob("data_batch_*.bin"))
    test = sorted(root.glob("test_batch.bin"))
    if not train or not test:
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {root}")
    return train, test
