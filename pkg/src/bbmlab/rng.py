"""Counter-based random numbers for reproducible, order-independent simulation.

Every particle in a simulated tree owns a 64-bit lineage word derived from
its path to the root.  Draw i of purpose tag p for that particle is the
Philox-4x32-10 output at counter (word_lo, word_hi, i, p) under the key
(seed_lo, seed_hi).  Realizations therefore do not depend on the order in
which the tree is traversed or on how work is split across processes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint32(0x9E3779B9)
_PHILOX_W1 = np.uint32(0xBB67AE85)
_LO32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def philox4x32(counter, key, rounds: int = 10):
    """Philox-4x32 block cipher used as a stateless RNG.

    counter: uint32 arrays (c0, c1, c2, c3), broadcastable to a common shape.
    key: uint32 pair (k0, k1), broadcastable against the counter.
    Returns four uint32 arrays of the broadcast shape.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
    k0 = np.asarray(key[0], dtype=np.uint64)
    k1 = np.asarray(key[1], dtype=np.uint64)
    c0, c1, c2, c3, k0, k1 = np.broadcast_arrays(c0, c1, c2, c3, k0, k1)
    k0, k1 = k0.copy(), k1.copy()
    with np.errstate(over="ignore"):
        for _ in range(rounds):
            p0 = _PHILOX_M0 * c0
            p1 = _PHILOX_M1 * c2
            hi0, lo0 = p0 >> _SHIFT32, p0 & _LO32
            hi1, lo1 = p1 >> _SHIFT32, p1 & _LO32
            c0, c1, c2, c3 = (hi1 ^ c1 ^ k0), lo1, (hi0 ^ c3 ^ k1), lo0
            k0 = (k0 + _PHILOX_W0) & _LO32
            k1 = (k1 + _PHILOX_W1) & _LO32
    out = (c0, c1, c2, c3)
    return tuple(np.asarray(c, dtype=np.uint32) for c in out)


def splitmix64(x):
    """Bijective 64-bit mixer; good avalanche, used to derive lineage words."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _SM_GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def child_words(parent_words, child_index):
    """Lineage word of child number ``child_index`` (0-based) of each parent.

    Fold-in construction: re-mix the parent, add the sibling index, mix
    again.  Unlike an xor of two mixed families this cannot cancel
    structurally when parent words themselves come from ``splitmix64``.
    """
    with np.errstate(over="ignore"):
        idx = np.asarray(child_index, dtype=np.uint64) + np.uint64(1)
        base = splitmix64(np.asarray(parent_words, dtype=np.uint64)) + idx
    return splitmix64(base)


def root_word() -> np.uint64:
    return splitmix64(np.uint64(1))


def _key_from_seed(seed: int):
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    return (np.uint32(s & _LO32), np.uint32(s >> _SHIFT32))


def _counter_from_words(words, draw_index, tag):
    w = np.asarray(words, dtype=np.uint64)
    return (
        np.asarray(w & _LO32, dtype=np.uint32),
        np.asarray(w >> _SHIFT32, dtype=np.uint32),
        np.asarray(draw_index, dtype=np.uint32),
        np.asarray(tag, dtype=np.uint32),
    )


def _to_unit_interval(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two uint32 words -> one double, strictly inside (0, 1)."""
    u64 = (np.asarray(a, dtype=np.uint64) << _SHIFT32) | np.asarray(b, dtype=np.uint64)
    return ((u64 >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def uniform_pair(seed: int, words, draw_index, tag) -> tuple[np.ndarray, np.ndarray]:
    """Two independent uniforms in (0,1) per (word, draw_index)."""
    c0, c1, c2, c3 = philox4x32(_counter_from_words(words, draw_index, tag),
                                _key_from_seed(seed))
    return _to_unit_interval(c0, c1), _to_unit_interval(c2, c3)


def uniforms(seed: int, words, draw_index, tag) -> np.ndarray:
    return uniform_pair(seed, words, draw_index, tag)[0]


def normals(seed: int, words, draw_index, tag) -> np.ndarray:
    """Standard normals via the inverse CDF (one per (word, draw_index))."""
    return ndtri(uniforms(seed, words, draw_index, tag))


def exponentials(seed: int, words, draw_index, tag) -> np.ndarray:
    """Unit-mean exponentials."""
    return -np.log(uniforms(seed, words, draw_index, tag))


class CounterStream:
    """Sequential RNG facade over the counter-based core.

    Used where a plain stream of draws is wanted (point-process samplers,
    bootstrap resampling) while keeping the whole artifact on one generator
    family.  A stream is identified by (seed, stream word); consuming draws
    advances only the local counter.
    """

    def __init__(self, seed: int, stream: int = 0):
        self._seed = int(seed)
        self._word = splitmix64(np.uint64(stream & 0xFFFFFFFFFFFFFFFF))
        self._index = 0

    def _next_block(self, n: int, tag: int) -> np.ndarray:
        idx = self._index + np.arange(n, dtype=np.uint64)
        self._index += n
        u1, u2 = uniform_pair(self._seed, np.broadcast_to(self._word, (n,)),
                              idx, np.uint32(tag))
        return np.stack([u1, u2], axis=1).reshape(-1)

    def uniform(self, n: int) -> np.ndarray:
        need = (n + 1) // 2
        return self._next_block(need, 0)[:n]

    def exponential(self, n: int, mean: float = 1.0) -> np.ndarray:
        return -mean * np.log(self.uniform(n))

    def normal(self, n: int) -> np.ndarray:
        return ndtri(self.uniform(n))

    def poisson(self, mean: float) -> int:
        """Single Poisson draw; inversion for small means, PTRS otherwise."""
        if mean < 0:
            raise ValueError("poisson mean must be >= 0")
        if mean == 0.0:
            return 0
        if mean < 30.0:
            # inversion by multiplication of uniforms
            limit = np.exp(-mean)
            k, prod = 0, 1.0
            while True:
                prod *= float(self.uniform(1)[0])
                if prod <= limit:
                    return k
                k += 1
        # normal approximation refined by a second-stage correction is not
        # adequate for tail studies; use simple table-free PTRS-like loop
        b = 0.931 + 2.53 * np.sqrt(mean)
        a = -0.059 + 0.02483 * b
        inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
        v_r = 0.9277 - 3.6224 / (b - 2.0)
        while True:
            u = float(self.uniform(1)[0]) - 0.5
            v = float(self.uniform(1)[0])
            us = 0.5 - abs(u)
            k = int(np.floor((2.0 * a / us + b) * u + mean + 0.43))
            if us >= 0.07 and v <= v_r:
                return k
            if k < 0 or (us < 0.013 and v > us):
                continue
            from scipy.special import gammaln
            if (np.log(v) + np.log(inv_alpha) - np.log(a / (us * us) + b)
                    <= k * np.log(mean) - mean - gammaln(k + 1.0)):
                return k

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform on [0, high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)
