"""Dataset ingestion: CIFAR-10 binary files and synthetic grating images.

The synthetic set gives each class a distinct sinusoidal grating (frequency,
orientation and phase all depend on the class id) plus uniform pixel noise of
a configurable level, so classes are separable by construction and a run fits
in seconds. The CIFAR-10 reader parses the binary batch layout: 3073-byte
records, one label byte then 3072 channel-planar pixel bytes.

The labeled/unlabeled partition for semi-supervised runs takes the first
ceil(f * N) entries of one seeded shuffle, so the labeled subsets nest as the
fraction grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ImageTensor, RngStream

CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10


class DataSource(str, Enum):
    SYNTHETIC = "synthetic"
    CIFAR10 = "cifar10-binary"


@dataclass(frozen=True)
class DatasetSpec:
    """Where the pre-training set comes from and how it is labeled."""

    source: DataSource = DataSource.SYNTHETIC
    path: str = ""
    classes: int = 8
    per_class: int = 64
    image_size: int = 16
    noise: float = 0.25
    label_fraction: float = 0.0
    limit: int = 2000  # cap on CIFAR records ingested, desk-scale default

    def __post_init__(self):
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must be in [0, 1], got {self.label_fraction}")
        if self.source is DataSource.SYNTHETIC:
            if self.classes < 2:
                raise ValueError(f"need >= 2 classes, got {self.classes}")
            if self.per_class < 1 or self.image_size < 2:
                raise ValueError("per_class must be >= 1 and image_size >= 2")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")


@dataclass
class Dataset:
    """Images as one (N, H, W, C) float32 array plus int64 labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.images.shape[0]

    def image(self, i: int) -> ImageTensor:
        return ImageTensor(self.images[i])

    def image_list(self) -> list[ImageTensor]:
        return [ImageTensor(self.images[i]) for i in range(len(self))]

    @property
    def input_dim(self) -> int:
        _, h, w, c = self.images.shape
        return h * w * c


def load_cifar10(path: str, limit: int | None = None) -> Dataset:
    """Parse a CIFAR-10 binary batch file.

    Each record is 1 label byte (0-9) followed by 3072 pixel bytes in
    channel-planar order (1024 R, then G, then B), row-major 32x32. Pixels
    are scaled to [0, 1]. A file whose length is not a whole number of
    records is rejected outright, as is any out-of-range label.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: length {len(blob)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise ValueError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    images = (pixels.astype(np.float32) / 255.0).copy()
    return Dataset(images, labels, CIFAR_CLASSES)


def synth_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Class-conditioned gratings with uniform noise; labels are exact.

    At noise 0 every sample of a class is the identical pattern. Channels get
    small phase offsets so the three planes are distinct but class-locked.
    """
    if spec.classes < 2:
        raise ValueError(f"need >= 2 classes, got {spec.classes}")
    s = spec.image_size
    ys, xs = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    rng = RngStream(seed, stream_id=0xDA7A)
    images = np.empty((spec.classes * spec.per_class, s, s, 3), dtype=np.float32)
    labels = np.empty(spec.classes * spec.per_class, dtype=np.int64)
    for c in range(spec.classes):
        theta = math.pi * c / spec.classes
        freq = 1.0 + 0.5 * c
        phase = 2.0 * math.pi * c / spec.classes
        axis = (np.cos(theta) * xs + np.sin(theta) * ys) / s
        pattern = np.empty((s, s, 3), dtype=np.float64)
        for ch in range(3):
            pattern[:, :, ch] = 0.5 + 0.45 * np.sin(2.0 * math.pi * freq * axis + phase + 0.5 * ch)
        for k in range(spec.per_class):
            i = c * spec.per_class + k
            noise = spec.noise * (rng.uniform(size=(s, s, 3)) - 0.5)
            images[i] = np.clip(pattern + noise, 0.0, 1.0).astype(np.float32)
            labels[i] = c
    return Dataset(images, labels, spec.classes)


def labeled_mask(n: int, fraction: float, rng: RngStream) -> np.ndarray:
    """Boolean mask marking the labeled subset: first ceil(f * n) of one shuffle.

    The same stream gives nested subsets across fractions (f = 0.3 is a
    subset of f = 0.5), which keeps label-fraction sweeps consistent.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    k = math.ceil(fraction * n)
    mask = np.zeros(n, dtype=bool)
    if k > 0:
        perm = rng.permutation(n)
        mask[perm[:k]] = True
    return mask
