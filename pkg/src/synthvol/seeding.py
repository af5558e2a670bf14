"""Deterministic seed derivation and generator construction.

Every stochastic operation in the package draws from an explicit generator.
Child seeds are derived from (seed, key...) tuples so that independent
consumers (volumes, views, strategies) get independent, order-free streams:
deriving the stream for "sagittal" does not depend on whether "axial" was
derived first.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

_U32 = 2**32


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) % _U32


def child_seed(seed: int, *keys: int | str) -> int:
    """Derive a stable child seed from a master seed and a key path."""
    entropy = [int(seed) % _U32] + [_key_to_int(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2)
    return int(state[0]) ^ (int(state[1]) << 32)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) % (2**63))
    return gen


def numpy_generator(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) % (2**63))
