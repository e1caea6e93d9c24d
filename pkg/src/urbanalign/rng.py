"""Deterministic seed derivation for subsystem RNG streams.

All randomness in the package flows from a single root seed. Subsystem
streams (parameter init, data generation, batch shuffling, ...) get their
own seeds via a splitmix64 expansion keyed by a string label, so adding a
new stream never perturbs existing ones.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One splitmix64 output step for the given 64-bit state."""
    z = (state + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(root: int, label: str) -> int:
    """Derive a stable 64-bit subsystem seed from a root seed and a label.

    The label bytes are folded into a splitmix64 chain one at a time;
    equal (root, label) pairs always yield the same seed.
    """
    x = splitmix64(root & _MASK64)
    for b in label.encode("utf-8"):
        x = splitmix64(x ^ b)
    return x


def rng_for(root: int, label: str) -> np.random.Generator:
    """A numpy Generator seeded from ``derive_seed(root, label)``."""
    return np.random.default_rng(derive_seed(root, label))
