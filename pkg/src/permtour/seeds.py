"""Deterministic seed derivation.

Every random draw in the pipeline is keyed by a 64-bit root seed plus a
label path such as ("gumbel", instance_index, pass_index).  Derivation is
a pure function, so regenerating any stream never depends on call order,
worker count, or how much of the pipeline ran before it.  Streams are
counter-based (Philox), which keeps instance generation prefix-stable and
makes training resumable without serializing RNG state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive(seed: int, *labels: int | str) -> int:
    """Mix a root seed with a label path into a new 64-bit seed.

    Strings are folded in bytewise so component names ("gumbel",
    "dropout", ...) give independent streams from the same root.
    """
    state = seed & _MASK64
    for label in labels:
        if isinstance(label, str):
            for byte in label.encode("utf-8"):
                state = _splitmix64(state ^ byte)
        else:
            state = _splitmix64(state ^ (int(label) & _MASK64))
        state = _splitmix64(state)
    return state


def stream(seed: int, *labels: int | str) -> np.random.Generator:
    """Philox generator keyed by (seed, labels); independent of call order."""
    key = derive(seed, *labels)
    return np.random.Generator(np.random.Philox(key=key))
