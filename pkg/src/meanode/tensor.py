"""Dense numerics shared by every model: states, RMS norms and seeded draws.

A state is a float64 array of shape (D, T): T tokens living in R^D. Vector
valued blocks use T = 1. Batches of n states are stacked as (n, D, T).

Randomness is counter-based: a SeedPath hashes (master seed, path) into a
Philox key, so the draw attached to a path never depends on the order in which
other paths were sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from meanode.errors import ConfigError, NonFiniteError, ShapeError

FloatArray = NDArray[np.float64]


class SeedTag(StrEnum):
    LAYER = "layer"
    UNIT = "unit"
    SLOT = "slot"
    REPETITION = "repetition"
    INPUT = "input"
    TARGET = "target"
    REFERENCE = "reference"
    PROJECTION = "projection"


_TAG_CODES = {tag: code for code, tag in enumerate(SeedTag)}


@dataclass(frozen=True)
class SeedPath:
    """A master seed plus a path of (tag, index) pairs naming one stream."""

    master: int
    path: tuple[tuple[SeedTag, int], ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.master < 2**64:
            raise ConfigError(f"master seed {self.master} is not a 64-bit seed")
        for _, index in self.path:
            if index < 0:
                raise ConfigError(f"seed path index {index} must be nonnegative")

    def child(self, tag: SeedTag | str, index: int = 0) -> SeedPath:
        return SeedPath(self.master, (*self.path, (SeedTag(tag), int(index))))

    def _sequence(self) -> np.random.SeedSequence:
        key: list[int] = []
        for tag, index in self.path:
            key.extend((_TAG_CODES[tag], index))
        return np.random.SeedSequence(self.master, spawn_key=tuple(key))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self._sequence()))

    def derive_seed(self) -> int:
        """A fresh 64-bit master seed for this path (e.g. one per repetition)."""
        return int(self._sequence().generate_state(1, np.uint64)[0])


def ensure_finite(arr: NDArray, what: str = "state", **where: int | None) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}", **where)


def as_state(x: ArrayLike) -> FloatArray:
    """Coerce x to a finite (D, T) float64 state; 1-D input means T = 1."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"a state must be (D,) or (D, T), got shape {arr.shape}")
    ensure_finite(arr)
    return arr


def as_batch(xs: ArrayLike) -> FloatArray:
    """Coerce a batch to (n, D, T); a single state becomes a batch of one."""
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim in (1, 2):
        arr = as_state(arr)[None]
    if arr.ndim != 3:
        raise ShapeError(f"a batch of states must be (n, D, T), got shape {arr.shape}")
    ensure_finite(arr)
    return arr


def rms_norm(x: ArrayLike) -> float:
    """D^{-1/2} times the Euclidean norm, averaged over tokens when T > 1."""
    state = as_state(x)
    per_token = np.linalg.norm(state, axis=0) / math.sqrt(state.shape[0])
    return float(per_token.mean())


def batch_rms(xs: FloatArray) -> FloatArray:
    """rms_norm of every state of an (n, D, T) batch."""
    per_token = np.linalg.norm(xs, axis=1) / math.sqrt(xs.shape[1])
    return per_token.mean(axis=-1)


def gaussian_sample(seed: SeedPath, n: int, std: float) -> FloatArray:
    """n iid N(0, std^2) draws, bit-reproducible from the seed path.

    Draws are prefix-stable: the first m entries of a sample of size n >= m
    equal a sample of size m from the same path.
    """
    if std < 0 or not math.isfinite(std):
        raise ConfigError(f"standard deviation must be nonnegative, got {std}")
    if n < 0:
        raise ConfigError(f"sample size must be nonnegative, got {n}")
    if std == 0:
        return np.zeros(n)
    return std * seed.generator().standard_normal(n)
