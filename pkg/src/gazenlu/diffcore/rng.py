"""Counter-based random streams.

Every source of randomness in the package flows through :class:`RngState`,
a (seed, stream_id) pair backed by the Philox counter-based bit generator.
Distinct stream ids select distinct Philox keys, so substreams never
overlap and any draw sequence is reproducible from its (seed, stream_id)
alone, independent of what other streams consumed.

Derived distributions (normal, Gumbel, categorical, shuffle) are computed
here from raw uniforms instead of numpy's distribution methods, so the
exact draw sequence is pinned by this file rather than by numpy internals.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
# Guards log(0) in the inverse-CDF transforms below.
_EPS = 1e-20


def fold_key(*parts: int | str) -> int:
    """Stable 64-bit key from a mixed tuple of ints and strings.

    Unlike builtin ``hash`` this is identical across interpreter runs.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class RngState:
    """One deterministic draw stream identified by (seed, stream_id)."""

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen: np.random.Generator | None = None

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, *parts: int | str) -> "RngState":
        """Fresh non-overlapping stream keyed by this stream plus ``parts``."""
        return RngState(self.seed, fold_key(self.stream_id, *parts))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(
                np.random.Philox(key=[self.seed, self.stream_id])
            )
        return self._gen

    # -- draw helpers ---------------------------------------------------

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform [0, 1) doubles."""
        return self.generator.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller from raw uniforms."""
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = np.clip(self.generator.random(half), _EPS, None)
        u2 = self.generator.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        out = z[:n].reshape(shape)
        return out if shape else float(out)

    def gumbel(self, shape=()) -> np.ndarray:
        """Standard Gumbel(0, 1) noise, -log(-log(U))."""
        u = self.generator.random(shape)
        return -np.log(-np.log(u + _EPS) + _EPS)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform ints in [low, high) via floor of scaled uniforms."""
        u = self.generator.random(shape)
        out = (low + np.floor(u * (high - low))).astype(np.int64)
        return np.minimum(out, high - 1)

    def shuffled(self, items: list) -> list:
        """Fisher-Yates shuffled copy of ``items``."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self.integers(0, i + 1))
            out[i], out[j] = out[j], out[i]
        return out

    def categorical(self, probs: np.ndarray) -> int:
        """One draw from a discrete distribution by inverse CDF.

        Accepts unnormalized nonnegative weights with a positive total.
        """
        probs = np.asarray(probs, dtype=np.float64)
        if (probs < 0).any() or probs.sum() <= 0:
            raise ValueError(f"weights must be nonnegative with positive sum, got {probs}")
        u = float(self.generator.random())
        cdf = np.cumsum(probs)
        return int(np.searchsorted(cdf, u * cdf[-1], side="right").clip(0, len(probs) - 1))
