"""Counter-based SplitMix64 generator.

Every output is a pure function of ``(key, counter)``, so draws can be made in
any order or split across workers without changing the values.  The algorithm
is fixed here rather than borrowed from numpy so that recorded seeds keep
producing the same streams across library upgrades.

Algorithm ``splitmix64-ctr`` version 1:

    z = key + (counter + 1) * 0x9E3779B97F4A7C15   (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

Doubles take the top 53 bits: ``(z >> 11) * 2**-53``.  A substream key is
``mix(seed ^ mix(stream + GOLDEN))`` where ``mix`` is the finaliser above.
"""

import numpy as np

ALGORITHM = "splitmix64-ctr"
VERSION = 1

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, stream: int = 0) -> int:
    """Key of the independent substream ``stream`` under ``seed``."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    return _mix_int((seed & _MASK) ^ _mix_int(stream + GOLDEN))


def raw_u64(key: int, start: int, n: int) -> np.ndarray:
    """``n`` consecutive 64-bit outputs of stream ``key`` from ``start``."""
    ctr = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + ctr * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def uniform01(key: int, start: int, n: int) -> np.ndarray:
    return (raw_u64(key, start, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


class CounterRng:
    """Sequential view over one substream.

    >>> a = CounterRng(7).random(3)
    >>> b = CounterRng(7).random(3)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.key = stream_key(self.seed, self.stream)
        self.counter = 0

    def random(self, n=None):
        size = 1 if n is None else int(np.prod(n))
        out = uniform01(self.key, self.counter, size)
        self.counter += size
        if n is None:
            return float(out[0])
        return out.reshape(n)

    def uniform(self, low, high, n=None):
        return low + (high - low) * self.random(n)

    def integers(self, low: int, high: int, n=None):
        """Integers in ``[low, high)``; float-scaled, so bias is below 2**-40."""
        u = self.random(n)
        if n is None:
            return int(low + (high - low) * u)
        return np.floor(low + (high - low) * u).astype(np.int64)

    def normal(self, n):
        """Box-Muller standard normals."""
        n = int(np.prod(n)) if not isinstance(n, int) else n
        m = (n + 1) // 2
        u1 = self.random(m)
        u2 = self.random(m)
        rad = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, stream: int) -> "CounterRng":
        """Child generator on an independent substream of this one's key."""
        return CounterRng(self.key, stream)
