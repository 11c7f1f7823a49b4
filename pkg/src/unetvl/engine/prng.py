"""Seeded, splittable random streams on a counter-based generator.

Streams are derived from a 64-bit seed through labelled splits. Each split
extends the Philox spawn key with a stable hash of the label, so distinct
labels give independent streams by construction and the same (seed, label
path) always reproduces the same bit stream.
"""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, resolve_dtype


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


class Prng:
    """Deterministic random stream with labelled splitting."""

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *labels) -> "Prng":
        """Independent child stream identified by the label path."""
        key = self.spawn_key + tuple(_label_key(l) for l in labels)
        return Prng(self.seed, _spawn_key=key)

    # raw array draws -------------------------------------------------------

    def normal(self, shape, std: float = 1.0, dtype=None) -> np.ndarray:
        d = resolve_dtype(dtype)
        return (self._gen.standard_normal(shape) * std).astype(d)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=None) -> np.ndarray:
        d = resolve_dtype(dtype)
        return self._gen.uniform(low, high, shape).astype(d)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def trunc_normal(self, shape, std: float = 0.02, clip_sigmas: float = 2.0, dtype=None) -> np.ndarray:
        """Normal draw with out-of-range values resampled (true truncation)."""
        d = resolve_dtype(dtype)
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > clip_sigmas
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > clip_sigmas
        return (out * std).astype(d)

    # tensor-valued initializers --------------------------------------------

    def weight(self, shape, std: float = 0.02, dtype=None) -> Tensor:
        """Learnable weight: truncated normal, std 0.02, clipped at 2 sigma."""
        return Tensor(self.trunc_normal(shape, std=std, dtype=dtype), requires_grad=True)

    def normal_weight(self, shape, std: float, dtype=None) -> Tensor:
        return Tensor(self.normal(shape, std=std, dtype=dtype), requires_grad=True)
