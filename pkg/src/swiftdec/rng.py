"""Counter-based deterministic randomness.

Every random decision in the engine is keyed by (seed, counter) instead of
drawing from a stateful stream. A sequence position always consumes the same
uniform deviate no matter how many speculative branches were evaluated before
it, which is what makes speculative output reproduce autoregressive output
byte for byte.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def mix(seed: int, counter: int) -> int:
    """64-bit hash of a (seed, counter) pair."""
    return _splitmix64(_splitmix64(seed & _MASK64) ^ (counter & _MASK64))


def uniform_at(seed: int, counter: int) -> float:
    """Uniform deviate in [0, 1) for a (seed, counter) key."""
    return (mix(seed, counter) >> 11) * (1.0 / (1 << 53))


def derive_seed(seed: int, tag: str) -> int:
    """Stable seed for a named substream (e.g. branch selection vs sampling)."""
    h = seed & _MASK64
    for byte in tag.encode():
        h = _splitmix64(h ^ byte)
    return h
