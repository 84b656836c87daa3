"""Pinned, portable pseudo-random stream.

Every random draw in kgx goes through :class:`SplitMix64` so fixtures never
depend on the platform or numpy's default generator. The stream is
counter-based and vectorised with wrapping uint64 arithmetic; floats are
produced from the top 53 bits, which converts exactly on any IEEE platform.
"""
import hashlib

import numpy as np

RNG_VERSION = "splitmix64-v1"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed, *keys):
    """Stable 64-bit seed for a named sub-stream."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(k) for k in keys)).encode())
    return int.from_bytes(h.digest()[:8], "little")


class SplitMix64:
    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def child(self, *keys):
        return SplitMix64(derive_seed(self.seed, *keys))

    def u64(self, n):
        idx = np.arange(self._counter + 1, self._counter + 1 + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + _GOLDEN * idx)

    def uniform(self, n=None, low=0.0, high=1.0):
        size = 1 if n is None else n
        u = (self.u64(size) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        out = low + (high - low) * u
        return float(out[0]) if n is None else out

    def integers(self, low, high, n=None):
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError("empty integer range")
        size = 1 if n is None else n
        out = np.int64(low) + (self.u64(size) % np.uint64(high - low)).astype(np.int64)
        return int(out[0]) if n is None else out

    def permutation(self, n):
        return np.argsort(self.u64(n), kind="stable")

    def choice(self, n_options, weights=None):
        if weights is None:
            return self.integers(0, n_options)
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w) / w.sum()
        return int(min(np.searchsorted(cdf, self.uniform(), side="right"), n_options - 1))

    def binomial_noise(self, n, sigma):
        """Centred integer noise with standard deviation ``sigma`` (sum of 4*sigma^2 fair bits)."""
        k = int(round(4 * sigma * sigma))
        if k == 0:
            return np.zeros(n, dtype=np.int16)
        if k > 64:
            raise ValueError("sigma too large for bit-count noise")
        bits = self.u64(n)
        if k < 64:
            bits &= np.uint64((1 << k) - 1)
        return (np.bitwise_count(bits).astype(np.int16) - (k // 2)).astype(np.int16)
