"""Synthetic single-object shape images with ground-truth object masks.

Each 3x32x32 image holds one shape (disk, square, triangle or cross) painted
over a dark, smooth seeded noise background.  The background is kept dark
so that deleting the object to black also removes its silhouette.  Pixel
values are quantized to 8-bit levels at generation time so that images
survive a PPM round trip exactly.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError
from .formats import hwc_to_image, image_to_hwc, read_pgm, read_ppm, write_pgm, write_ppm
from .saliency import upsample_bilinear

CLASS_NAMES = ("disk", "square", "triangle", "cross")
MIN_COVERAGE = 0.04
MAX_COVERAGE = 0.40


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int
    gt_mask: np.ndarray  # (H, W) bool


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    masks: np.ndarray  # (N, H, W) bool

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SyntheticSample:
        return SyntheticSample(self.images[i], int(self.labels[i]), self.masks[i])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.masks[index])

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def _shape_mask(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == 0:
        r = rng.uniform(4.5, 9.5)
        half = r
    elif kind == 1:
        s = rng.uniform(8.0, 17.0)
        half = s / 2
    elif kind == 2:
        h = rng.uniform(11.0, 20.0)
        b = h * rng.uniform(0.9, 1.2)
        half = max(h, b) / 2
    else:
        a = rng.uniform(11.0, 20.0)
        t = rng.uniform(3.0, 5.5)
        half = a / 2
    cy = rng.uniform(half + 1, size - half - 1)
    cx = rng.uniform(half + 1, size - half - 1)
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 1:
        return (np.abs(dy) <= s / 2) & (np.abs(dx) <= s / 2)
    if kind == 2:
        depth = (dy + h / 2) / h  # 0 at apex, 1 at base
        return (depth >= 0) & (depth <= 1) & (np.abs(dx) <= depth * b / 2)
    return ((np.abs(dy) <= t / 2) & (np.abs(dx) <= a / 2)) | (
        (np.abs(dx) <= t / 2) & (np.abs(dy) <= a / 2))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((3, size // 4, size // 4))
    smooth = np.stack([upsample_bilinear(c, size, size) for c in coarse])
    return 0.12 * smooth + 0.04 * rng.random((3, size, size))


def make_sample(label: int, rng: np.random.Generator, size: int = 32) -> SyntheticSample:
    while True:
        mask = _shape_mask(label, rng, size)
        if MIN_COVERAGE <= mask.mean() <= MAX_COVERAGE:
            break
    image = _background(rng, size)
    color = rng.uniform(0.55, 1.0, 3)
    texture = 0.1 * rng.random((3, size, size))
    obj = np.clip(color[:, None, None] - texture, 0.0, 1.0)
    image = np.where(mask[None], obj, image)
    image = np.floor(255.0 * np.clip(image, 0.0, 1.0) + 0.5) / 255.0
    return SyntheticSample(image.astype(np.float32), int(label), mask)


def generate_dataset(n: int, seed: int, num_classes: int = 4, size: int = 32) -> Dataset:
    """``n`` samples with balanced classes, fully determined by ``seed``."""
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise DomainError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
    if n < num_classes:
        raise DomainError(f"need at least {num_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    samples = [make_sample(int(c), rng, size) for c in labels]
    return Dataset(np.stack([s.image for s in samples]),
                   labels.astype(np.int64),
                   np.stack([s.gt_mask for s in samples]))


def save_dataset(ds: Dataset, directory) -> None:
    """One PPM image and one PGM mask per sample plus ``labels.csv``."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "class"])
        for i in range(len(ds)):
            write_ppm(os.path.join(directory, "images", f"{i:05d}.ppm"), image_to_hwc(ds.images[i]))
            write_pgm(os.path.join(directory, "masks", f"{i:05d}.pgm"),
                      ds.masks[i].astype(np.uint8) * 255)
            w.writerow([i, int(ds.labels[i]), CLASS_NAMES[ds.labels[i]]])


def load_dataset(directory) -> Dataset:
    path = os.path.join(directory, "labels.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"dataset at {directory} is empty")
    images, labels, masks = [], [], []
    for row in rows:
        i = int(row["index"])
        images.append(hwc_to_image(read_ppm(os.path.join(directory, "images", f"{i:05d}.ppm"))))
        m = read_pgm(os.path.join(directory, "masks", f"{i:05d}.pgm"))
        if not np.all((m == 0) | (m == 255)):
            raise FormatError(f"mask {i} is not binary")
        masks.append(m == 255)
        labels.append(int(row["label"]))
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), np.stack(masks))
