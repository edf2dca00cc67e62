"""Datasets: the CIFAR-10 binary batch format and a synthetic
frequency-separable image set.

Images are always float64 arrays of shape (n, channels, side, side) with
values in [0, 1]; labels are int64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .util import atomic_write_bytes

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_SHAPE = (3, 32, 32)


class DataFormatError(ValueError):
    """Malformed input bytes; the message carries the offending offset."""


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.images.shape[0]} images but labels shape {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, index) -> "LabeledImageSet":
        return LabeledImageSet(self.images[index], self.labels[index], self.classes, self.name)

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std over all pixels (std floored at 1e-8)."""
        mean = self.images.mean(axis=(0, 2, 3))
        std = np.maximum(self.images.std(axis=(0, 2, 3)), 1e-8)
        return mean, std


def read_cifar10(paths) -> LabeledImageSet:
    """Parse one or more CIFAR-10 binary batch files.

    Each record is 3073 bytes: a label byte in [0, 9] followed by 3072 pixel
    bytes in channel-major order. Truncated files and out-of-range labels are
    reported with their byte offset / record index.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                f"truncated record starts at byte offset {len(raw) - len(raw) % CIFAR_RECORD}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = records[:, 0]
        bad = np.flatnonzero(lab > 9)
        if bad.size:
            raise DataFormatError(
                f"{path}: record {int(bad[0])} has label {int(lab[bad[0]])} outside [0, 9]"
            )
        chunks.append(records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0)
        labels.append(lab.astype(np.int64))
    return LabeledImageSet(
        np.concatenate(chunks), np.concatenate(labels), classes=10, name="cifar10"
    )


def write_cifar10(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`read_cifar10` for building fixtures.

    Pixels are mapped back with round(v * 255); byte-valued inputs therefore
    round-trip exactly.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[1:] != CIFAR_SHAPE:
        raise ValueError(f"images must be (n, 3, 32, 32), got {images.shape}")
    if labels.min() < 0 or labels.max() > 9:
        raise ValueError("labels must lie in [0, 9]")
    px = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    records = np.empty((images.shape[0], CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = px.reshape(images.shape[0], -1)
    atomic_write_bytes(path, records.tobytes())


def synth_freq_dataset(side: int = 8, count: int = 512, noise_std: float = 0.1,
                       low_freq: int = 1, high_freq: int = 3, amplitude: float = 0.25,
                       seed: int = 0) -> LabeledImageSet:
    """Two-class single-channel images separated only by frequency content.

    Class c's template is 0.5 + amplitude * cos(2*pi*f_c*(row+col)/side) with
    f_0 = low_freq and f_1 = high_freq (fixed phase, so the noiseless classes
    are exactly distinguishable); i.i.d. Gaussian pixel noise is added and the
    result clipped to [0, 1]. Labels alternate 0,1 so any prefix is balanced.
    """
    if side < 2:
        raise ValueError(f"side must be >= 2, got {side}")
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if not (0 <= low_freq < high_freq <= side // 2):
        raise ValueError(
            f"need 0 <= low_freq < high_freq <= side/2, got {low_freq}, {high_freq}"
        )
    grid = np.arange(side)
    diag = grid[:, None] + grid[None, :]
    templates = np.stack([
        0.5 + amplitude * np.cos(2.0 * np.pi * freq * diag / side)
        for freq in (low_freq, high_freq)
    ])
    labels = np.arange(count, dtype=np.int64) % 2
    rng = np.random.Generator(np.random.PCG64(seed))
    images = templates[labels][:, None, :, :]
    if noise_std:
        images = images + rng.normal(0.0, noise_std, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledImageSet(images, labels, classes=2, name="synthetic")
