"""Small labelled image sets for desk-scale training."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
from torchvision import datasets, transforms

from vitgauge import seeding
from vitgauge.errors import ConfigurationError

logger = logging.getLogger(__name__)

KINDS = ("synthetic-shapes", "ingest-directory")
SHAPES = ("hstripes", "vstripes", "checker", "disc", "ring", "diagonal", "cross", "gradient")

# Pixels in [0, 1] are mapped to roughly zero mean, unit variance.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ToyDataset:
    """Images (n, 3, R, R), integer labels and a train/val tag per sample."""

    images: torch.Tensor
    labels: torch.Tensor
    split: np.ndarray
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    def train(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self._subset("train")

    def val(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self._subset("val")

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.classes)

    def _subset(self, tag: str) -> Tuple[torch.Tensor, torch.Tensor]:
        index = torch.from_numpy(np.flatnonzero(self.split == tag))
        return self.images[index], self.labels[index]


def make_dataset(
    kind: str = "synthetic-shapes",
    seed: int = 0,
    resolution: int = 32,
    classes: int = 4,
    samples: int = 4096,
    val_fraction: float = 0.2,
    root: Optional[Path] = None,
) -> ToyDataset:
    """Build a dataset.

    Args:
        kind: "synthetic-shapes" renders one pattern family per class;
            "ingest-directory" loads `root/<class>/<image>` files.
        seed: Seed of the "data" stream; equal seeds give identical pixels.
        resolution: Square side R in pixels.
        classes: Number of synthetic classes (at most 8).
        samples: Synthetic sample count, or the cap on ingested images.
        val_fraction: Share of each class tagged "val".
        root: Image directory for the ingest kind.

    Returns:
        A class-balanced ToyDataset for the synthetic kind.

    Raises:
        DatasetError: For unknown kinds, bad sizes, or an unreadable directory.
    """
    if kind not in KINDS:
        raise DatasetError(f"Unknown dataset kind: {kind}. Use 'synthetic-shapes' or 'ingest-directory'.")
    if resolution < 1:
        raise DatasetError(f"Resolution must be positive, got {resolution}")
    if not 0 <= val_fraction < 1:
        raise DatasetError(f"val_fraction must be in [0, 1), got {val_fraction}")

    if kind == "synthetic-shapes":
        images, labels = _generate_shapes(seed, resolution, classes, samples)
    else:
        images, labels = _ingest_directory(root, resolution, samples, seed)
        classes = int(labels.max()) + 1

    split = _stratified_split(labels, val_fraction)
    images = (images - PIXEL_MEAN) / PIXEL_STD
    logger.info("Dataset %s: %d samples, %d classes, %dpx", kind, len(labels), classes, resolution)
    return ToyDataset(
        images=torch.from_numpy(images.astype(np.float32)),
        labels=torch.from_numpy(labels.astype(np.int64)),
        split=split,
        classes=classes,
    )


def _generate_shapes(seed: int, resolution: int, classes: int, samples: int) -> Tuple[np.ndarray, np.ndarray]:
    if not 2 <= classes <= len(SHAPES):
        raise DatasetError(f"Synthetic data supports 2 to {len(SHAPES)} classes, got {classes}")
    if samples < classes:
        raise DatasetError(f"Need at least one sample per class, got {samples} for {classes} classes")
    rng = seeding.generator(seed, "data")
    labels = rng.permutation(np.arange(samples) % classes)

    axis = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    images = np.empty((samples, 3, resolution, resolution))
    for i, label in enumerate(labels):
        mask = _PATTERNS[SHAPES[label]](xx, yy, rng)
        foreground = rng.uniform(0.4, 1.0, 3)[:, None, None]
        background = rng.uniform(0.0, 0.3, 3)[:, None, None]
        noise = rng.normal(0, 0.05, (3, resolution, resolution))
        images[i] = background * (1 - mask) + foreground * mask + noise
    return np.clip(images, 0, 1), labels


def _stripes(u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    freq = 4 * rng.uniform(0.8, 1.2)
    return (np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi)) > 0).astype(float)


def _checker(xx, yy, rng):
    freq = 3 * rng.uniform(0.8, 1.2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    return (np.sin(2 * np.pi * freq * xx + phase[0]) * np.sin(2 * np.pi * freq * yy + phase[1]) > 0).astype(float)


def _radius(xx, yy, rng):
    cx, cy = rng.uniform(0.35, 0.65, 2)
    return np.hypot(xx - cx, yy - cy)


def _disc(xx, yy, rng):
    return (_radius(xx, yy, rng) < rng.uniform(0.2, 0.35)).astype(float)


def _ring(xx, yy, rng):
    return (np.abs(_radius(xx, yy, rng) - rng.uniform(0.2, 0.3)) < 0.07).astype(float)


def _cross(xx, yy, rng):
    cx, cy = rng.uniform(0.3, 0.7, 2)
    width = rng.uniform(0.06, 0.1)
    return ((np.abs(xx - cx) < width) | (np.abs(yy - cy) < width)).astype(float)


def _gradient(xx, yy, rng):
    angle = rng.uniform(0, 2 * np.pi)
    ramp = xx * np.cos(angle) + yy * np.sin(angle)
    return (ramp - ramp.min()) / (ramp.max() - ramp.min())


_PATTERNS: Dict[str, Callable] = {
    "hstripes": lambda xx, yy, rng: _stripes(yy, rng),
    "vstripes": lambda xx, yy, rng: _stripes(xx, rng),
    "checker": _checker,
    "disc": _disc,
    "ring": _ring,
    "diagonal": lambda xx, yy, rng: _stripes((xx + yy) / np.sqrt(2), rng),
    "cross": _cross,
    "gradient": _gradient,
}


def _ingest_directory(root: Optional[Path], resolution: int, samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    if root is None or not Path(root).is_dir():
        raise DatasetError(f"Image directory not found: {root}")
    transform = transforms.Compose([transforms.Resize((resolution, resolution)), transforms.ToTensor()])
    try:
        folder = datasets.ImageFolder(str(root), transform=transform)
    except (FileNotFoundError, RuntimeError) as e:
        raise DatasetError(f"{root} must contain one sub-directory of images per class: {e}") from e
    if len(folder) == 0:
        raise DatasetError(f"No images found under {root}")

    order = seeding.generator(seed, "data").permutation(len(folder))[:samples]
    images, labels = [], []
    for index in sorted(order):
        try:
            image, label = folder[int(index)]
        except OSError as e:
            raise DatasetError(f"Cannot decode {folder.samples[int(index)][0]}: {e}") from e
        images.append(image.numpy())
        labels.append(label)
    return np.stack(images).astype(float), np.asarray(labels)


def _stratified_split(labels: np.ndarray, val_fraction: float) -> np.ndarray:
    split = np.full(len(labels), "train", dtype=object)
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        split[members[:int(round(len(members) * val_fraction))]] = "val"
    return split


class DatasetError(ConfigurationError):
    """Raised when a dataset cannot be built."""
