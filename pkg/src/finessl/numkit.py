"""Stable scalar/vector kernels and a deterministic counter-based random stream.

Everything here is platform-independent: the random stream is built from
64-bit integer mixing (splitmix-style), so identical (seed, stream_id, draw
sequence) reproduces bit-identical output anywhere.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RandomStream", "log_sum_exp", "softmax", "softmax_rows", "log_softmax_rows"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# Named sub-streams used across the engine; any int works, these keep runs legible.
STREAM_DATA_GEN = 1
STREAM_AUGMENT = 2
STREAM_BATCH_ORDER = 3
STREAM_INIT = 4


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over a uint64 array."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class RandomStream:
    """Counter-based deterministic random stream with independent sub-streams.

    Draw i of stream (seed, stream_id) is a pure function of (seed, stream_id, i),
    so distinct sub-streams never interact and any prefix can be replayed.
    Single-owner: callers that need parallel randomness must ``derive`` sub-streams
    up front.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        base = np.array([self.seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        sid = np.array([self.stream_id & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        self._key = _mix64(_mix64(base) ^ _mix64(sid * _GOLDEN + np.uint64(1)))[0]
        self._counter = 0

    def derive(self, label: str | int) -> "RandomStream":
        """Fork an independent sub-stream keyed by ``label``; self is unaffected."""
        sid = _fnv1a(label) if isinstance(label, str) else int(label)
        child = RandomStream.__new__(RandomStream)
        child.seed = self.seed
        child.stream_id = sid
        key_arr = np.array([self._key], dtype=np.uint64)
        sid_arr = np.array([sid & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        child._key = _mix64(key_arr ^ _mix64(sid_arr * _GOLDEN + np.uint64(1)))[0]
        child._counter = 0
        return child

    def _words(self, n: int) -> np.ndarray:
        ctr = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(self._key + ctr * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n float64 samples in [0, 1), 53-bit resolution."""
        return (self._words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, shape, sd: float = 1.0) -> np.ndarray:
        """Gaussian(0, sd^2) samples via Box-Muller; shape may be int or tuple."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 shifted into (0, 1] so log never sees zero
        u1 = (self._words(m).astype(np.float64) % (2.0 ** 53) + 1.0) * (2.0 ** -53)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (out * sd).reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n int64 samples uniform in [0, bound). bound must fit in 2**52."""
        if bound <= 0:
            raise ValueError("integers: bound must be positive")
        if bound > 2 ** 52:
            raise ValueError("integers: bound too large for exact float mapping")
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via stable argsort of random keys."""
        return np.argsort(self.uniform(n), kind="stable")

    def subset(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order arbitrary but deterministic."""
        if k > n:
            raise ValueError("subset: k exceeds n")
        return self.permutation(n)[:k]


def log_sum_exp(v) -> float:
    """log(sum(exp(v))) with max-shift; safe for |v_k| up to ~1e4."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("log_sum_exp: input must be a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("log_sum_exp: input contains non-finite entries")
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def softmax(v) -> np.ndarray:
    """Shift-invariant softmax of a vector; output sums to 1."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax: input must be a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax: input contains non-finite entries")
    e = np.exp(v - np.max(v))
    return e / np.sum(e)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D logit array."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
