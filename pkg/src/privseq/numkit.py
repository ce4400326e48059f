"""Numeric primitives and seeded randomness shared by every other module.

Arrays are plain float64 ``numpy.ndarray`` values. Randomness goes through
:class:`Rng`, a thin wrapper over numpy's counter-based Philox generator with
named, independent streams so that data sampling, DP noise, initialisation
and dropout never share draws.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

EULER_GAMMA = float(np.euler_gamma)

# Stream names used across the package. Any other string is also accepted;
# these are listed so the mapping is documented in one place.
STREAMS = ("init", "data", "noise", "dropout", "eval", "mc")


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def check_finite(x, what: str = "array") -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite entries")
    return x


def _stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Deterministic random stream.

    ``Rng(seed, "noise")`` and ``Rng(seed, "data")`` are statistically
    independent; the same ``(seed, stream)`` pair reproduces the same draws
    on any platform (Philox-4x64 keyed from ``SeedSequence(seed,
    spawn_key=(crc32(stream),))``).
    """

    def __init__(self, seed: int, stream: str = "default"):
        self.seed = int(seed)
        self.stream = stream
        ss = np.random.SeedSequence(self.seed, spawn_key=(_stream_id(stream),))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}")

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def gumbel(self, size=None) -> np.ndarray:
        return self._gen.gumbel(0.0, 1.0, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def stable_softmax(x, axis: int = -1) -> np.ndarray:
    x = check_finite(np.asarray(x, dtype=np.float64), "softmax input")
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(x, axis: int = -1) -> np.ndarray:
    x = check_finite(np.asarray(x, dtype=np.float64), "logsumexp input")
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def gumbel_max_expectation(
    x: Sequence[float], n_samples: int, rng: Rng, chunk: int = 200_000
) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E[max_j(x_j + g_j)]`` with i.i.d. standard Gumbel ``g``.

    Returns ``(estimate, standard_error)``. The estimate converges to
    ``logsumexp(x) + EULER_GAMMA``.
    """
    x = check_finite(np.asarray(x, dtype=np.float64).ravel(), "gumbel_max input")
    if x.size == 0:
        raise ValueError("gumbel_max_expectation needs a non-empty vector")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        m = np.max(x[None, :] + rng.gumbel((k, x.size)), axis=1)
        total += float(m.sum())
        total_sq += float(np.dot(m, m))
        done += k
    mean = total / n_samples
    if n_samples == 1:
        return mean, float("inf")
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return mean, float(np.sqrt(var / n_samples))


def gaussian_sample(mean: float, var: float, shape, rng: Rng) -> np.ndarray:
    if var < 0:
        raise ValueError(f"variance must be non-negative, got {var}")
    if var == 0:
        return np.full(shape, float(mean))
    return mean + np.sqrt(var) * rng.normal(shape)


def frob_inner(a, b) -> float:
    """``<A, B> = trace(A^T B)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.vdot(a, b))
