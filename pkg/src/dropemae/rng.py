"""Deterministic counter-based random number generator.

Everything stochastic in this package (masking, weight init, phantom noise,
direction sampling) draws from this generator so that runs replay bit-exactly
from a seed, independently of numpy's global state.

The core is splitmix64: output n is a fixed 64-bit mix of
``seed + (n+1) * 0x9E3779B97F4A7C15``, which makes bulk generation a pure
vectorized map over a counter range. The mix function is pinned by the
reference output sequence asserted in the tests (seed 0 ->
0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, ...).
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """Mix a single 64-bit integer; used for seed derivation."""
    with np.errstate(over="ignore"):
        return int(_mix(np.uint64(x & _U64_MASK) + _GOLDEN))


def derive_seed(seed: int, *labels: int) -> int:
    """Fold integer labels into a seed to get an independent substream."""
    s = seed & _U64_MASK
    for lab in labels:
        s = mix64(s ^ mix64(lab & _U64_MASK))
    return s


class Rng:
    """Seeded stream of uniform/normal variates and permutations."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & _U64_MASK)
        self._counter = 0

    @property
    def seed(self) -> int:
        return int(self._seed)

    def spawn(self, *labels: int) -> "Rng":
        """Independent child stream; deterministic in (seed, labels)."""
        return Rng(derive_seed(int(self._seed), *labels))

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs."""
        with np.errstate(over="ignore"):
            ctr = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
            out = _mix(self._seed + ctr * _GOLDEN)
        self._counter += n
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform in [0, 1) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        """Standard normal via Box-Muller on disjoint uniform pairs."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 in (0, 1] so the log is finite
        u1 = (self.u64(m) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * (2.0 ** -53)
        u2 = (self.u64(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * math.pi * u2), r * np.sin(2.0 * math.pi * u2)])[:n]
        z = z * scale
        return z.reshape(shape) if shape else z[0]

    def randint(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} from {n} without replacement")
        return self.permutation(n)[:k]

    def uniform_sphere(self, n: int) -> np.ndarray:
        """n unit vectors, normalized Gaussian triples; shape (n, 3)."""
        v = self.normal((n, 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        # resample the (measure-zero) degenerate rows
        while np.any(norms < 1e-12):
            bad = norms[:, 0] < 1e-12
            v[bad] = self.normal((int(bad.sum()), 3))
            norms = np.linalg.norm(v, axis=1, keepdims=True)
        return v / norms
