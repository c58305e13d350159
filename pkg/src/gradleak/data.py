"""Synthetic toy image datasets.

Every image is a pure function of ``(generator, seed, index)`` so a dataset
can be regenerated from its description alone. The class label is drawn first
and the generator parameters are derived from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

GENERATORS = ("smooth_gradients", "gaussian_blobs", "checker_textures")
_CODES = {g: i for i, g in enumerate(GENERATORS)}


@dataclass(frozen=True)
class ToyDataset:
    generator: str
    count: int
    size: int = 16
    channels: int = 3
    classes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.generator not in _CODES:
            raise ContractError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if min(self.count, self.size, self.channels, self.classes) < 1:
            raise ContractError("count, size, channels and classes must be positive")

    def item(self, index: int) -> tuple[np.ndarray, int]:
        return make_image(self.generator, self.seed, index, self.size, self.channels, self.classes)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = zip(*(self.item(i) for i in range(self.count)))
        return np.stack(xs), np.asarray(ys, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "generator": self.generator,
            "count": self.count,
            "size": self.size,
            "channels": self.channels,
            "classes": self.classes,
            "seed": self.seed,
        }


def make_image(generator: str, seed: int, index: int, size: int, channels: int, classes: int):
    """One [size, size, channels] image in [0, 1] and its label."""
    rng = np.random.default_rng([seed, _CODES[generator], index])
    label = int(rng.integers(classes))
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    tint = 0.6 + 0.4 * rng.random(channels)
    if generator == "smooth_gradients":
        theta = 2 * np.pi * (label + 0.3 * rng.uniform(-1, 1)) / classes
        ramp = xx * np.cos(theta) + yy * np.sin(theta)
        curve = 0.15 * rng.uniform(-1, 1) * (xx**2 + yy**2)
        base = 0.5 + 0.35 * ramp / np.sqrt(2) + curve
        img = base[..., None] * tint + 0.1 * rng.uniform(-1, 1, channels)
    elif generator == "gaussian_blobs":
        angle = 2 * np.pi * label / classes
        cy, cx = 0.5 * np.sin(angle), 0.5 * np.cos(angle)
        cy += 0.1 * rng.uniform(-1, 1)
        cx += 0.1 * rng.uniform(-1, 1)
        width = rng.uniform(0.25, 0.4)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        img = 0.15 + 0.1 * rng.random(channels) + 0.7 * blob[..., None] * tint
    else:
        period = 2 + label % 4
        diagonal = (label // 4) % 2
        phase = rng.integers(period)
        iy, ix = np.indices((size, size))
        coord = (iy + ix) if diagonal else iy
        stripes = ((coord + phase) // period + (ix // period if not diagonal else 0)) % 2
        img = (0.25 + 0.5 * stripes)[..., None] * tint + 0.05 * rng.uniform(-1, 1, channels)
    return np.clip(img, 0.0, 1.0), label


def sample_batch(images: np.ndarray, labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Indices of ``n`` images with pairwise distinct labels."""
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    if n > classes.size:
        raise ContractError(f"cannot draw {n} images with distinct labels from {classes.size} classes")
    picked = rng.choice(classes, size=n, replace=False)
    return np.array([rng.choice(np.flatnonzero(labels == c)) for c in picked])
