"""Array plumbing and seeded randomness.

All numeric state is float64 numpy arrays. Randomness flows through an
explicit :class:`Rng` handle threaded into every stochastic operation; child
generators come from labeled splits, so independent runs (seeds, trials,
modes) get independent, individually reproducible streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ParameterError


class Rng:
    """Deterministic random generator with labeled splitting.

    Same (seed, split-label path) always yields the same stream. Each
    instance is single-threaded; share work across threads by splitting,
    never by sharing one instance.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(int(w) for w in _spawn_key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self._spawn_key))
        )

    def split(self, label: str) -> "Rng":
        """Child generator with an independent stream derived from `label`."""
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        words = tuple(int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4))
        return Rng(self.seed, self._spawn_key + words)

    # Thin passthroughs; keep all entropy behind this one interface.
    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, size=None, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self._spawn_key})"


def gaussian_vector(dim: int, std: float, rng: Rng) -> np.ndarray:
    """I.i.d. N(0, std^2) samples; std = 0 short-circuits to exact zeros."""
    if dim < 0:
        raise ParameterError(f"dim must be >= 0, got {dim}")
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.zeros(dim)
    return rng.normal(0.0, std, dim)


def poisson_subsample(n: int, q: float, rng: Rng) -> np.ndarray:
    """Indices of {0..n-1}, each included independently with probability q."""
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"sampling rate must be in [0, 1], got {q}")
    if n < 0:
        raise ParameterError(f"n must be >= 0, got {n}")
    # Degenerate rates have a forced result; skip the draw.
    if q == 0.0:
        return np.empty(0, dtype=np.int64)
    if q == 1.0:
        return np.arange(n, dtype=np.int64)
    return np.flatnonzero(rng.random(n) < q).astype(np.int64)


def l2_norm(v: np.ndarray) -> float:
    """Euclidean norm; 0.0 for the empty vector."""
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))
