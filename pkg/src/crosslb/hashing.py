"""Seedable 64-bit hashing shared by the ring, caches, and generators.

FNV-1a over the key bytes followed by a SplitMix64 finalizer; both have
published reference definitions, so values are stable across platforms.
"""

from __future__ import annotations

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes, seed: int = 0) -> int:
    h = _FNV_OFFSET ^ (seed & _MASK)
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def hash64(key: str, seed: int = 0) -> int:
    return splitmix64(fnv1a64(key.encode("utf-8"), seed))


def token_stream(key: str, n: int, space: int = 1 << 20, offset: int = 1 << 24) -> tuple[int, ...]:
    """Deterministic pseudo-token sequence derived from a string key.

    Used wherever generated output content must be reproducible from a
    request id alone (replica KV cache and workload builders must agree).
    """
    base = hash64(key)
    return tuple(offset + (splitmix64(base + i) % space) for i in range(n))
