"""Synthetic multi-class volumes: random ellipsoids with intensity bands.

Each foreground class contributes one ellipsoid (later classes overwrite on
overlap); voxel intensity is the class band (c + 0.5) / num_classes plus
Gaussian noise, clipped to [0, 1]. Every volume is generated from a stream
split on (seed, "volume", index), so datasets are fully determined by the
seed and two volumes never share randomness.
"""

from __future__ import annotations

import numpy as np

from .engine import Prng

NOISE_STD = 0.05


def _ellipsoid_mask(extent: tuple, center: np.ndarray, semi: np.ndarray) -> np.ndarray:
    axes = [np.arange(e, dtype=np.float64) for e in extent]
    hh, ww, dd = np.meshgrid(*axes, indexing="ij")
    return (
        ((hh - center[0]) / semi[0]) ** 2
        + ((ww - center[1]) / semi[1]) ** 2
        + ((dd - center[2]) / semi[2]) ** 2
    ) <= 1.0


def generate_volume(rng: Prng, extent: tuple, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """One (volume, label) pair: volume f32 (1, H, W, D) in [0, 1], label int32.

    Ellipsoid centers stay far enough from the borders that no shape is
    clipped; semi-axes in [0.15, 0.30] of the extent keep each foreground
    fraction within (0.01, 0.5). Redraws until every class is present.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    ext = np.asarray(extent, dtype=np.float64)
    for attempt in range(64):
        draw = rng.split("attempt", attempt)
        label = np.zeros(extent, dtype=np.int32)
        for c in range(1, num_classes):
            sub = draw.split("class", c)
            center = ext * sub.uniform((3,), 0.35, 0.65)
            semi = ext * sub.uniform((3,), 0.15, 0.30)
            label[_ellipsoid_mask(extent, center, semi)] = c
        present = np.unique(label)
        if len(present) == num_classes:
            break
    else:
        raise RuntimeError("could not place all classes in 64 attempts")
    bands = (np.arange(num_classes) + 0.5) / num_classes
    noise = rng.split("noise").normal(extent, std=NOISE_STD, dtype="f64")
    volume = np.clip(bands[label] + noise, 0.0, 1.0).astype(np.float32)
    return volume[None, ...], label


class SyntheticVolumeDataset:
    """Deterministic train/val volumes indexed 0..n_train+n_val-1."""

    def __init__(self, seed: int, extent, num_classes: int, n_train: int, n_val: int):
        if isinstance(extent, int):
            extent = (extent, extent, extent)
        self.seed = seed
        self.extent = tuple(extent)
        self.num_classes = num_classes
        self.n_train = n_train
        self.n_val = n_val
        self._root = Prng(seed).split("dataset")

    def volume(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        if not (0 <= index < self.n_train + self.n_val):
            raise IndexError(f"volume index {index} out of range")
        return generate_volume(self._root.split("volume", index), self.extent, self.num_classes)

    @property
    def train_indices(self) -> list[int]:
        return list(range(self.n_train))

    @property
    def val_indices(self) -> list[int]:
        return list(range(self.n_train, self.n_train + self.n_val))
