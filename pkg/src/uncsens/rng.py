"""Counter-based random streams.

A stream is addressed by ``(master_seed, stream_id, counter)``. The bits at a
given counter position come from the Philox4x64 block cipher keyed by
``(master_seed, stream_id)``, so any draw can be reproduced without replaying
the draws before it, and parallel workers that own disjoint streams produce
the same numbers as a single-threaded run.

The counter counts 64-bit words. Uniforms consume one word each; normals are
produced by Box-Muller from pairs of words, so ``n`` normals consume
``2 * ceil(n / 2)`` words.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4
_TWO_PI = 2.0 * np.pi


def derive_stream_id(parent: int, *labels: object) -> int:
    """Hash a parent stream id and a label path into a child stream id."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(parent & _MASK64).to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    master_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self) -> None:
        self.master_seed = int(self.master_seed) & _MASK64
        self.stream_id = int(self.stream_id) & _MASK64
        if self.counter < 0:
            raise ValueError("counter must be non-negative")

    def substream(self, *labels: object) -> RngStream:
        """Independent child stream keyed by ``labels``; starts at counter 0."""
        return RngStream(self.master_seed, derive_stream_id(self.stream_id, *labels), 0)

    def copy(self) -> RngStream:
        return RngStream(self.master_seed, self.stream_id, self.counter)

    def _words(self, n: int) -> np.ndarray:
        block, offset = divmod(self.counter, _WORDS_PER_BLOCK)
        bitgen = np.random.Philox(key=[self.master_seed, self.stream_id], counter=block)
        words = bitgen.random_raw(offset + n)[offset:]
        self.counter += n
        return words

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 bits of resolution."""
        n = int(n)
        if n == 0:
            return np.empty(0)
        return (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, shape: int | tuple[int, ...]) -> np.ndarray:
        """Standard-normal variates of the requested shape (Box-Muller)."""
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
        angle = _TWO_PI * u[:, 1]
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` (Fisher-Yates)."""
        perm = np.arange(n)
        u = self.uniforms(max(n - 1, 0))
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[pos] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def gaussian_draw(stream: RngStream, mean: float, variance: float) -> float:
    """One draw from N(mean, variance); ``variance == 0`` returns ``mean`` exactly."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    u = stream.normals(1)[0]
    if variance == 0:
        return float(mean)
    return float(mean + np.sqrt(variance) * u)


def gaussian_draws(stream: RngStream, mean: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """Elementwise vectorised :func:`gaussian_draw` over broadcastable arrays."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance < 0):
        raise ValueError("variance must be >= 0")
    shape = np.broadcast_shapes(mean.shape, variance.shape)
    return mean + np.sqrt(variance) * stream.normals(shape)
