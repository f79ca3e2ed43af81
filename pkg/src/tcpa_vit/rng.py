"""Portable pseudo-random streams.

Every random draw in the package comes from :class:`Stream`: a PCG64
(XSL-RR 128/64) generator whose 128-bit state and increment are derived from
an integer seed through SplitMix64. Uniforms use the top 53 bits of each raw
64-bit output; normals use the Box-Muller transform. Nothing depends on
numpy's seeding policy or its ziggurat sampler, so streams are reproducible
across numpy versions.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Stream:
    """Deterministic stream of uniforms, normals and permutations."""

    def __init__(self, seed: int):
        s = int(seed) & _MASK64
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self._bitgen = np.random.PCG64()
        self._bitgen.state = {
            "bit_generator": "PCG64",
            "state": {
                "state": (words[0] << 64) | words[1],
                "inc": ((words[2] << 64) | words[3]) | 1,
            },
            "has_uint32": 0,
            "uinteger": 0,
        }

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws via Box-Muller (pairs, cosine branch first)."""
        n = int(n)
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def truncated_normal(self, n: int, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal draws with ``|z| <= bound`` (redrawn until in range), scaled by ``std``."""
        z = self.normal(n)
        bad = np.flatnonzero(np.abs(z) > bound)
        while bad.size:
            z[bad] = self.normal(bad.size)
            bad = bad[np.abs(z[bad]) > bound]
        return z * std

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` (Fisher-Yates)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.raw(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def derive_seed(*parts: int) -> int:
    """Combine integers into a single 64-bit seed (order-sensitive)."""
    s = 0
    for p in parts:
        s, _ = splitmix64(s ^ (int(p) & _MASK64))
        _, s = splitmix64(s)
    return s
