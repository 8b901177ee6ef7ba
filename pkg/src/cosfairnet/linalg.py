"""Dense kernels and seeded random streams.

Matrices are plain 2-D float64 numpy arrays and parameter vectors are 1-D
float64 arrays. ``matmul`` and ``dot`` accumulate strictly left to right over
the inner index, so results are bit-reproducible and equal to a naive
triple loop.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numba
import numpy as np

from .errors import DegenerateVectorError, ShapeError

NORM_EPS = 1e-12


@numba.njit(cache=True, nogil=True)
def _matmul_kernel(a, b, out):
    n, m = a.shape
    p = b.shape[1]
    for i in range(n):
        for j in range(p):
            out[i, j] = 0.0
        for k in range(m):
            aik = a[i, k]
            for j in range(p):
                out[i, j] += aik * b[k, j]
    return out


@numba.njit(cache=True, nogil=True)
def _dot_kernel(u, v):
    s = 0.0
    for i in range(u.shape[0]):
        s += u[i] * v[i]
    return s


def as_matrix(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    return _matmul_kernel(a, b, out)


def dot(u, v) -> float:
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {u.shape} and {v.shape}")
    return float(_dot_kernel(u, v))


def norm(u) -> float:
    return float(np.sqrt(dot(u, u)))


def norm_product(uu: float, vv: float) -> float:
    """|u|*|v| from the squared norms.

    sqrt(uu*vv) rounds once, so cos(u, u) and cos(u, -u) come out as exactly
    1 and -1; fall back to the product of roots on overflow or underflow.
    """
    p = uu * vv
    if 0.0 < p < math.inf:
        return math.sqrt(p)
    return math.sqrt(uu) * math.sqrt(vv)


def cosine(u, v) -> float:
    """Cosine of the angle between two parameter vectors, clamped to [-1, 1].

    Raises DegenerateVectorError when either norm is below 1e-12 instead of
    returning NaN.
    """
    uu, vv = dot(u, u), dot(v, v)
    nu, nv = math.sqrt(uu), math.sqrt(vv)
    if nu < NORM_EPS or nv < NORM_EPS:
        raise DegenerateVectorError(f"cosine of a zero-norm vector (|u|={nu:g}, |v|={nv:g})")
    return min(1.0, max(-1.0, dot(u, v) / norm_product(uu, vv)))


@lru_cache(maxsize=256)
def _philox_key(entropy: tuple) -> np.ndarray:
    return np.random.SeedSequence(list(entropy)).generate_state(2, dtype=np.uint64)


class Rng:
    """Seeded random stream on top of the Philox4x64 counter generator.

    The seed (an int or tuple of ints) is hashed into the Philox key and the
    stream id occupies the high words of the 256-bit counter, so distinct
    streams never overlap and the same (seed, stream_id) reproduces the same
    draws on every platform.
    """

    def __init__(self, seed, stream_id: int = 0):
        if stream_id < 0:
            raise ValueError("stream_id must be non-negative")
        self.seed = seed
        self.stream_id = int(stream_id)
        entropy = tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else (int(seed),)
        key = _philox_key(entropy)
        counter = np.array(
            [0, 0, self.stream_id & 0xFFFFFFFFFFFFFFFF, self.stream_id >> 64], dtype=np.uint64
        )
        self._gen = np.random.Generator(np.random.Philox(key=key, counter=counter))

    def stream(self, stream_id: int) -> "Rng":
        return Rng(self.seed, stream_id)

    def normal(self, n, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be non-negative")
        return mean + std * self._gen.standard_normal(n)

    def uniform(self, n=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, n)

    def integers(self, low: int, high: int, n=None):
        return self._gen.integers(low, high, n)

    def permutation(self, n: int) -> np.ndarray:
        # numpy's in-place shuffle is Fisher-Yates
        idx = np.arange(n)
        self._gen.shuffle(idx)
        return idx


def rng_normal(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    return rng.normal(n, mean, std)
