"""Seeded, splittable random streams.

Every random draw in the package comes from a ``numpy.random.Generator``
built on the counter-based Philox bit generator.  Streams are keyed by the
run seed plus a tuple such as ``(epoch, batch, "diffusion-noise")``; string
parts are hashed to stable 32-bit integers so keys survive interpreter
restarts (Python's ``hash`` is salted).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, default_dtype


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Rng:
    """A run seed from which independent purpose-specific streams are derived."""

    seed: int

    def stream(self, *key) -> np.random.Generator:
        return stream(self.seed, *key)

    def for_step(self, epoch: int, batch: int, purpose: str) -> np.random.Generator:
        return stream(self.seed, epoch, batch, purpose)


def gaussian(rng: np.random.Generator, shape, dtype=None) -> Tensor:
    """I.i.d. standard normal entries, drawn in float64 then cast."""
    data = rng.standard_normal(tuple(shape))
    return Tensor(data.astype(dtype or default_dtype(), copy=False))
