"""Deterministic child-seed derivation for independent random streams.

Every randomized subsystem derives its generator from (master seed, stream
tag, index) so that runs are reproducible and resumable without carrying
serialized RNG state around.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

_U64 = (1 << 64) - 1


def _normalize(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & _U64


def child_seed(*keys) -> int:
    """Stable 64-bit seed derived from a tuple of ints and/or string tags."""
    ss = np.random.SeedSequence([_normalize(k) for k in keys])
    lo, hi = ss.generate_state(2)
    return (int(hi) << 32) | int(lo)


def child_rng(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(*keys)))


def child_torch_generator(*keys) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(child_seed(*keys) & ((1 << 63) - 1))
    return gen
