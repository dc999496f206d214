"""
Datasets: synthetic source/target image sets, IDX files, stratified splits and class weights.

Images are NHWC float64 in [0, 1].
"""

import math
import struct
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
from loguru import logger

from tascforge.errors import BadMagic, ClassTooSmall, CountMismatch, EmptyClass, TruncatedFile
from tascforge.nn.losses import ClassWeights
from tascforge.tensor import Tensor

NOISE_SIGMA = 0.1
TARGET_INTENSITY_SHIFT = 0.15
IDX_UBYTE = 0x08


class Style(StrEnum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class Dataset:
    images: Tensor
    labels: np.ndarray
    class_count: int
    split: str = "all"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatch(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def with_images(self, images: Tensor) -> "Dataset":
        """Same labels over different per-sample inputs, e.g. backbone features."""
        return Dataset(images, self.labels, self.class_count, self.split)


def generate_synthetic(
    classes: int,
    samples_per_class: int,
    h: int,
    w: int,
    c: int,
    seed: int | np.random.Generator,
    style: Style = Style.SOURCE,
) -> Dataset:
    """
    Oriented sinusoidal gratings, one orientation and frequency per class, with random phase,
    per-channel gain and gaussian pixel noise.

    The target style rotates every class by half the orientation spacing and brightens the image,
    so features learned on the source style transfer only partially.
    """
    if min(classes, samples_per_class, h, w, c) < 1:
        raise ValueError("class, sample and image dimensions must all be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    style = Style(style)

    ys, xs = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    rotation = math.pi / (2 * classes) if style is Style.TARGET else 0.0
    shift = TARGET_INTENSITY_SHIFT if style is Style.TARGET else 0.0

    images = np.empty((classes * samples_per_class, h, w, c))
    labels = np.repeat(np.arange(classes), samples_per_class)
    for k in range(classes):
        theta = math.pi * k / classes + rotation
        frequency = 1.5 + (k % 3)
        projection = xs * math.cos(theta) + ys * math.sin(theta)
        for s in range(samples_per_class):
            phase = rng.uniform(0.0, 2.0 * math.pi)
            gain = rng.uniform(0.7, 1.0, size=c)
            pattern = np.sin(2.0 * math.pi * frequency * projection + phase)
            image = 0.5 + 0.4 * pattern[..., None] * gain + shift
            images[k * samples_per_class + s] = image + rng.normal(0.0, NOISE_SIGMA, size=(h, w, c))

    logger.debug(f"generated {len(labels)} {style} samples of {h}x{w}x{c} over {classes} classes")
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes)


def _read_idx(path: Path) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise TruncatedFile(f"cannot read {path}: {e}") from e
    if len(data) < 4 or data[0] != 0 or data[1] != 0:  # noqa: PLR2004
        raise BadMagic(f"{path} is not an IDX file")
    if data[2] != IDX_UBYTE:
        raise BadMagic(f"{path} holds IDX type {data[2]:#04x}, only unsigned bytes are supported")

    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFile(f"{path} ends inside its header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = math.prod(dims)
    if len(data) - header < count:
        raise TruncatedFile(f"{path} holds {len(data) - header} of {count} data bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: Path, labels_path: Path) -> Dataset:
    """Images as N×H×W (one channel) or N×H×W×C unsigned bytes, labels as N unsigned bytes."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim not in (3, 4) or labels.ndim != 1:
        raise BadMagic(f"expected 3/4-d images and 1-d labels, got {images.ndim}-d and {labels.ndim}-d")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images_path} has {images.shape[0]} images, {labels_path} has {labels.shape[0]} labels")

    if images.ndim == 3:  # noqa: PLR2004
        images = images[..., None]
    labels = labels.astype(np.int64)
    class_count = int(labels.max()) + 1 if labels.size else 0
    logger.info(f"loaded {labels.shape[0]} samples of shape {images.shape[1:]} from {images_path}")
    return Dataset(images.astype(np.float64) / 255.0, labels, class_count)


def split(dataset: Dataset, val_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Stratified train/validation split; every class lands in both halves."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"validation fraction must lie in (0, 1), got {val_fraction}")

    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for k in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == k)
        if members.size < 2:  # noqa: PLR2004
            raise ClassTooSmall(f"class {k} has {members.size} samples, a split needs at least 2")
        members = rng.permutation(members)
        n_val = min(max(round(val_fraction * members.size), 1), members.size - 1)
        val_idx.append(members[:n_val])
        train_idx.append(members[n_val:])

    def take(parts: list[np.ndarray], tag: str) -> Dataset:
        idx = np.sort(np.concatenate(parts))
        return Dataset(dataset.images[idx], dataset.labels[idx], dataset.class_count, tag)

    return take(train_idx, "train"), take(val_idx, "val")


def class_weights(train: Dataset) -> ClassWeights:
    """w_k = 1/N_k over the training split."""
    counts = train.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyClass(f"classes {empty.tolist()} have no training samples")
    return ClassWeights(1.0 / counts)
