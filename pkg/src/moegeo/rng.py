"""Deterministic random streams.

Every random draw in the package comes from a counter-based Philox generator
(numpy's Philox: 4x64, 10 rounds) whose 128-bit key is derived from a 64-bit
master seed and a path of integer or string tags. Independent work units
(a trial of an experiment, a fold of a cross-validation, one epoch's shuffle)
get their own path, so results never depend on execution order or parallelism
degree, and a run can be reproduced in any language from this derivation rule
plus the published Philox spec.

Derivation rule (all arithmetic mod 2^64):

    state <- seed
    for each tag in path:
        t     <- tag if integer else FNV-1a-64(utf8(tag))
        state <- splitmix64_mix(state + GOLDEN xor t)
    key   <- state + (splitmix64_mix(state + GOLDEN) << 64)

where GOLDEN = 0x9E3779B97F4A7C15 and splitmix64_mix is the SplitMix64
finalizer. The key seeds Philox directly; no entropy pooling is involved.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidConfigError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: int) -> int:
    """SplitMix64 finalizer: bijective mixing of a 64-bit word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def check_seed(seed: int) -> int:
    """Validate a 64-bit unsigned master seed and return it as int."""
    seed = int(seed)
    if not 0 <= seed <= _MASK64:
        raise InvalidConfigError(f"seed must be in [0, 2^64), got {seed}")
    return seed


def derive_state(seed: int, *path: int | str) -> int:
    """Fold a tag path into the master seed; returns a 64-bit stream state."""
    state = check_seed(seed)
    for tag in path:
        if isinstance(tag, str):
            t = _fnv1a64(tag.encode("utf-8"))
        else:
            t = int(tag) & _MASK64
        state = _mix64(((state + _GOLDEN) & _MASK64) ^ t)
    return state


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Philox generator for the sub-stream named by ``path`` under ``seed``."""
    state = derive_state(seed, *path)
    key = state | (_mix64((state + _GOLDEN) & _MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key))
