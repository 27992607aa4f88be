"""Project-wide deterministic pseudo-randomness.

Everything random in the package flows through :class:`SplitMix64`, a
64-bit splitmix-style generator. The output sequence is fixed by
construction: draw ``i`` (1-based, counted from the generator's creation
or last draw batch) returns ``mix64(seed + i * GAMMA)`` where ``mix64``
is the standard splitmix finalizer. Because each output depends only on
the seed and the draw index, bulk draws vectorize over numpy uint64
arrays and produce the same values as repeated scalar calls.

Stream splitting for reproducible parallelism uses :func:`derive_seed`:
``derive_seed(seed, k1, k2, ...)`` folds each key in turn with
``s = mix64(s + (2*k + 1) * GAMMA)``. The odd multiplier keeps key 0
from being a no-op.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U_GAMMA = np.uint64(_GAMMA)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_TWO_PI = 2.0 * np.pi


def mix64(z: int) -> int:
    """Splitmix64 finalizer on a 64-bit integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Derive a child seed from a parent seed and integer keys.

    Distinct key tuples give independent-looking streams; the same tuple
    always gives the same child.
    """
    s = seed & _MASK
    for k in keys:
        s = mix64((s + ((2 * int(k) + 1) * _GAMMA)) & _MASK)
    return s


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _U_MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _U_MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Seeded splitmix-style generator with vectorized draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return mix64(self._state)

    def _raw(self, n: int) -> np.ndarray:
        """n raw 64-bit draws as a uint64 array; advances the stream by n."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        base = np.uint64(self._state) + idx * _U_GAMMA
        self._state = (self._state + n * _GAMMA) & _MASK
        return _mix_array(base)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform float64 array on [low, high); 53-bit mantissa resolution."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return (low + u * (high - low)).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normal array via Box-Muller on paired uniform draws."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 in (0, 1] so the log is finite.
        u1 = ((self._raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])
        return z[:n].reshape(shape)

    def randint(self, bound: int) -> int:
        """Uniform integer in [0, bound); modulo bias is negligible for
        the small bounds used here (instruction counts, gallery sizes)."""
        if bound <= 0:
            raise ValueError(f"randint bound must be positive, got {bound}")
        return self.next_u64() % bound

    def shuffled_indices(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def spawn(self, key: int) -> "SplitMix64":
        """Child generator on an independent stream keyed by ``key``."""
        return SplitMix64(derive_seed(self._state, key))
