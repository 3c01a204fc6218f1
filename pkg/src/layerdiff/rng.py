"""Deterministic, platform-independent random numbers.

Algorithm (``splitmix64-ctr``): a counter-based generator. Draw number ``i``
of a stream with seed ``s`` is ``mix(s + (i + 1) * GOLDEN)``, where ``mix`` is
the SplitMix64 finalizer and all arithmetic is modulo 2**64. Uniform doubles
take the top 53 bits; normals come from the Box-Muller transform applied to
consecutive pairs of uniforms (the cosine branch only, so each normal consumes
exactly two uniforms).

Sub-streams: ``rng.spawn(key)`` seeds a child with ``mix(s ^ mix(hash64(key)))``
where ``hash64`` is the first 8 bytes (little endian) of the SHA-256 of the
key's ``repr``. Children do not advance the parent.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "splitmix64-ctr"

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def _mix_int(x: int) -> int:
    return int(_mix(np.array([x & _MASK], dtype=np.uint64))[0])


def _hash64(key) -> int:
    digest = hashlib.sha256(repr(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class DRng:
    """Seeded stream of 64-bit draws. State is ``(seed, counter)``."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self):
        return f"DRng(seed={self.seed}, counter={self.counter})"

    def state(self) -> dict:
        return {"algorithm": ALGORITHM, "seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "DRng":
        if state.get("algorithm", ALGORITHM) != ALGORITHM:
            raise ValueError(f"unknown rng algorithm {state.get('algorithm')!r}")
        return cls(state["seed"], state["counter"])

    def spawn(self, *key) -> "DRng":
        return DRng(_mix_int(self.seed ^ _mix_int(_hash64(key))))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
        return _mix(z)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=()) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform((2 * n,))
        u1 = 1.0 - u[0::2]  # (0, 1], keeps the log finite
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, shape=()):
        """Uniform integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(shape)
        out = np.floor(low + (high - low) * u).astype(np.int64)
        out = np.minimum(out, high - 1)
        return int(out) if np.ndim(out) == 0 else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")
