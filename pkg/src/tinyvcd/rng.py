"""Deterministic counter-based PRNG used everywhere randomness is needed.

The generator is splitmix64 (Steele, Lea & Flood; the seeder of the
xorshift/xoshiro family), applied to a counter: draw i of stream s is
``mix64(s + i * GAMMA)``.  Because each draw depends only on (state,
counter) it vectorizes with numpy uint64 arithmetic and is reproducible
across platforms and worker counts.

Published constants:
    GAMMA = 0x9E3779B97F4A7C15   (golden-ratio increment)
    M1    = 0xBF58476D1CE4E5B9
    M2    = 0x94D049BB133111EB
"""

from __future__ import annotations

import math

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
M1 = np.uint64(0xBF58476D1CE4E5B9)
M2 = np.uint64(0x94D049BB133111EB)

_U53 = float(1 << 53)


def mix64(x):
    """splitmix64 finalizer; accepts a uint64 scalar or array."""
    x = np.uint64(x) if np.isscalar(x) else x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * M1
        x = (x ^ (x >> np.uint64(27))) * M2
    return x ^ (x >> np.uint64(31))


def derive_seed(seed: int, tag: int) -> int:
    """Stable sub-seed for stream `tag` of master `seed`."""
    with np.errstate(over="ignore"):
        base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + GAMMA * np.uint64(tag & 0xFFFFFFFFFFFFFFFF)
    return int(mix64(base))


class Rng:
    """Counter-based splitmix64 stream."""

    def __init__(self, seed: int):
        self.state = np.uint64(mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        self.counter = 0

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream; does not advance this stream."""
        return Rng(derive_seed(int(self.state), tag))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(self.state + idx * GAMMA)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) / _U53

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * float(self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller."""
        m = (n + 1) // 2
        u1 = np.maximum(self.uniforms(m), 1e-300)
        u2 = self.uniforms(m)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2.0 * math.pi * u2), r * np.sin(2.0 * math.pi * u2)])
        return out[:n]

    def normal_array(self, shape) -> np.ndarray:
        return self.normals(int(np.prod(shape))).reshape(shape)

    def randint(self, lo: int, hi: int) -> int:
        """Integer uniform on [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        # 53-bit uniforms give negligible modulo bias for toy-scale spans
        return lo + int(self.uniforms(1)[0] * span) % span

    def shuffle(self, items: list) -> list:
        """Fisher-Yates; returns a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(0, i)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, n: int, size: int, replace: bool = True) -> list[int]:
        """Sample `size` indices from range(n)."""
        if replace:
            return [self.randint(0, n - 1) for _ in range(size)]
        if size > n:
            raise ValueError("cannot sample more than n without replacement")
        return self.shuffle(list(range(n)))[:size]
