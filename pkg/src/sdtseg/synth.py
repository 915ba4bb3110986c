"""Synthetic segmentation scenes: coloured disks and rectangles on a
background, with additive Gaussian noise."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import LabelMask, read_array, read_mask, write_array, write_mask

SHAPE_KINDS = ("disk", "rectangle")


@dataclass(frozen=True)
class SynthSpec:
    size: int = 128
    classes: int = 5
    count: int = 250
    shapes: tuple[int, int] = (3, 8)
    radius: tuple[float, float] = (5.0, 18.0)
    kinds: tuple[str, ...] = SHAPE_KINDS
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "radius", tuple(self.radius))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if self.size < 2 or self.size % 2:
            raise ValueError("size must be an even number >= 2")
        if self.classes < 2 or self.classes > 255:
            raise ValueError("classes must be in 2..255")
        if self.count < 1:
            raise ValueError("count must be positive")
        lo, hi = self.shapes
        if not 0 <= lo <= hi:
            raise ValueError("shapes must be a (min, max) range")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError("radius must be a positive (min, max) range")
        if not self.kinds or set(self.kinds) - set(SHAPE_KINDS):
            raise ValueError(f"kinds must be a non-empty subset of {SHAPE_KINDS}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def palette(spec: SynthSpec) -> np.ndarray:
    """(C, 3) base colour per class, fixed by the seed."""
    return np.random.default_rng([spec.seed, 0xC0108]).uniform(0.0, 1.0, size=(spec.classes, 3))


def render_labels(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    labels = np.zeros((n, n), dtype=np.int64)
    yy, xx = np.mgrid[:n, :n]
    for _ in range(rng.integers(spec.shapes[0], spec.shapes[1] + 1)):
        kind = spec.kinds[rng.integers(len(spec.kinds))]
        cls = rng.integers(1, spec.classes)
        cy, cx = rng.uniform(0, n, size=2)
        if kind == "disk":
            r = rng.uniform(*spec.radius)
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            hy, hx = rng.uniform(*spec.radius, size=2)
            inside = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        labels[inside] = cls
    return labels


def generate_synthetic(spec: SynthSpec) -> tuple[np.ndarray, list[LabelMask]]:
    """Return ``(images, masks)`` with images shaped (count, 3, size, size).

    Image i only depends on (seed, i), so any prefix of a larger dataset is
    identical to the smaller one.
    """
    colours = palette(spec)
    images = np.empty((spec.count, 3, spec.size, spec.size))
    masks = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        labels = render_labels(spec, rng)
        image = colours[labels].transpose(2, 0, 1)
        if spec.noise_sigma > 0:
            image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
        images[i] = image
        masks.append(LabelMask(labels, spec.classes))
    return images, masks


def split_indices(count: int, seed: int, val_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split; returns sorted (train, val) index arrays."""
    n_val = int(round(count * val_fraction))
    order = np.random.default_rng([seed, 0x5B117]).permutation(count)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def write_dataset(directory, images: np.ndarray, masks: list[LabelMask], val: np.ndarray) -> None:
    """Write images as SDTF, masks as PGM and the validation indices as JSON."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (image, mask) in enumerate(zip(images, masks)):
        write_array(image, root / "images" / f"{i:05d}.sdtf")
        write_mask(mask, root / "masks" / f"{i:05d}.pgm")
    split = {"count": len(images), "classes": masks[0].classes, "val": [int(v) for v in val]}
    (root / "split.json").write_text(json.dumps(split, indent=1) + "\n")


def read_dataset(directory) -> tuple[np.ndarray, list[LabelMask], np.ndarray, np.ndarray]:
    """Inverse of write_dataset: ``(images, masks, train_idx, val_idx)``."""
    root = Path(directory)
    split = json.loads((root / "split.json").read_text())
    n, classes = split["count"], split["classes"]
    images = np.stack([read_array(root / "images" / f"{i:05d}.sdtf") for i in range(n)])
    masks = [read_mask(root / "masks" / f"{i:05d}.pgm", classes) for i in range(n)]
    val = np.array(sorted(split["val"]), dtype=np.int64)
    train = np.setdiff1d(np.arange(n), val)
    return images, masks, train, val
