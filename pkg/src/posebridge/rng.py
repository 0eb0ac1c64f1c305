"""Seed derivation and random generators.

Seeds are derived by folding keys through the splitmix64 finaliser
(constants 0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9, 0x94D049BB133111EB).
Streams are numpy ``Philox`` counter-based generators keyed by the derived
seed, so draws do not depend on the platform or on generation order.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported seed key {key!r}")


def derive_seed(*keys) -> int:
    """Fold an ordered tuple of ints/strings into one 64-bit seed."""
    state = 0
    for key in keys:
        state = splitmix64(state ^ _key_to_int(key))
    return state


def make_rng(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(*keys)))
