"""Synthetic grating images and stratified splits.

Each class is an oriented sinusoidal grating with its own angle and spatial
frequency. Samples draw a random phase and a small angle jitter, and then
Gaussian pixel noise is added on top.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes
from .errors import FormatError, ShapeError

DATA_MAGIC = b"AMCD"
DATA_VERSION = 1

SPLIT_TAGS = ("train", "val", "test")


@dataclass
class Dataset:
    images: np.ndarray  # (N, c, h, w) float32
    labels: np.ndarray  # (N,) int64
    split_tag: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be N x c x h x w, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def class_counts(self, num_classes=None):
        return np.bincount(self.labels, minlength=num_classes or self.num_classes)

    def subset(self, idx, split_tag=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split_tag or self.split_tag)


@dataclass(frozen=True)
class DataGenConfig:
    seed: int = 0
    num_per_class: int = 250
    image_size: int = 16
    channels: int = 1
    num_classes: int = 10
    noise_sigma: float = 1.0
    angle_jitter: float = 0.08  # radians

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.num_per_class < 1:
            raise ValueError("num_per_class must be >= 1")


def class_parameters(num_classes):
    """(angle, cycles-per-image) for every class."""
    n_freq = 2 if num_classes >= 4 else 1
    n_angle = math.ceil(num_classes / n_freq)
    freqs = np.linspace(2.0, 4.0, n_freq) if n_freq > 1 else np.array([3.0])
    return [(math.pi * (c % n_angle) / n_angle, float(freqs[c // n_angle])) for c in range(num_classes)]


def grating(size, angle, cycles, phase):
    coords = (np.arange(size) - (size - 1) / 2.0) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = xx * math.cos(angle) + yy * math.sin(angle)
    return np.cos(2 * math.pi * cycles * proj + phase)


def _generate_class(cfg, label, angle, cycles, rng):
    n, s = cfg.num_per_class, cfg.image_size
    phases = rng.uniform(0, 2 * math.pi, n)
    jitter = rng.uniform(-cfg.angle_jitter, cfg.angle_jitter, n)
    clean = np.stack([grating(s, angle + j, cycles, p) for j, p in zip(jitter, phases)])
    images = np.repeat(clean[:, None], cfg.channels, axis=1)
    if cfg.noise_sigma > 0:
        images = images + rng.normal(0.0, cfg.noise_sigma, images.shape)
    return images.astype(np.float32), np.full(n, label)


def generate(cfg):
    """Balanced dataset, deterministic in ``cfg.seed``; classes use independent streams."""
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.num_classes)
    imgs, labels = [], []
    for label, ((angle, cycles), ss) in enumerate(zip(class_parameters(cfg.num_classes), streams)):
        x, y = _generate_class(cfg, label, angle, cycles, np.random.default_rng(ss))
        imgs.append(x)
        labels.append(y)
    return Dataset(np.concatenate(imgs), np.concatenate(labels), "train")


def _stratified_counts(n, fractions):
    # largest remainder: every count is within 1 of its exact share
    exact = np.asarray(fractions) * n
    counts = np.floor(exact).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def split(data, fractions=(0.7, 0.2, 0.1), seed=0):
    """Disjoint class-stratified train/val/test split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three positive numbers summing to 1")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for cls in np.unique(data.labels):
        members = np.flatnonzero(data.labels == cls)
        members = members[rng.permutation(len(members))]
        counts = _stratified_counts(len(members), fractions)
        if (counts == 0).any():
            empty = SPLIT_TAGS[int(np.argmin(counts))]
            raise ValueError(f"class {cls} gets no samples in the {empty} split")
        bounds = np.cumsum(counts)[:-1]
        for part, chunk in zip(parts, np.split(members, bounds)):
            part.append(chunk)
    return tuple(data.subset(np.sort(np.concatenate(p)), tag) for p, tag in zip(parts, SPLIT_TAGS))


def dataset_to_bytes(data):
    n, c, h, w = data.images.shape
    if len(data) and data.labels.max() > 0xFFFF:
        raise ValueError("labels do not fit in u16")
    return b"".join([
        DATA_MAGIC,
        struct.pack("<5I", DATA_VERSION, n, c, h, w),
        np.ascontiguousarray(data.images, dtype="<f4").tobytes(),
        np.ascontiguousarray(data.labels, dtype="<u2").tobytes(),
    ])


def save_dataset(data, path):
    atomic_write_bytes(path, dataset_to_bytes(data))


def dataset_from_bytes(buf, split_tag="train", expected_shape=None):
    if buf[:4] != DATA_MAGIC:
        raise FormatError("bad magic: not a dataset file")
    if len(buf) < 24:
        raise FormatError("truncated dataset header")
    version, n, c, h, w = struct.unpack_from("<5I", buf, 4)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if expected_shape is not None and (c, h, w) != tuple(expected_shape):
        raise ShapeError(f"dataset images are {(c, h, w)}, expected {tuple(expected_shape)}")
    npx = n * c * h * w
    if len(buf) != 24 + 4 * npx + 2 * n:
        raise FormatError("truncated or oversized dataset file")
    images = np.frombuffer(buf, dtype="<f4", count=npx, offset=24).reshape(n, c, h, w)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=24 + 4 * npx)
    return Dataset(images.copy(), labels.astype(np.int64), split_tag)


def load_dataset(path, split_tag="train", expected_shape=None):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read(), split_tag, expected_shape)
