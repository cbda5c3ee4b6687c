"""Dense containers, deterministic randomness, and the dot-product similarity.

Everything downstream (augmentations, encoder, losses, metrics) builds on the
types here. Images are float32 in [0, 1]; embeddings are float64 so the loss
and gradient checks have headroom. Randomness comes from counter-based Philox
streams that can be forked into provably independent child streams, which is
what makes the whole pipeline reproducible and safe to parallelise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C image, float32 values in [0, 1], row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {arr.shape[2]}")
        if arr.size == 0:
            raise ValueError("image must be non-empty")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        """Row-major float64 copy, the encoder's input layout."""
        return self.data.astype(np.float64).ravel()


@dataclass(frozen=True)
class EmbeddingVector:
    """Float64 coordinate vector with an explicit unit-norm flag."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {arr.shape}")
        if self.normalized:
            norm = float(np.linalg.norm(arr))
            if abs(norm - 1.0) >= 1e-9:
                raise ValueError(f"normalized flag set but |v| = {norm}")
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EmbeddingBatch:
    """N embeddings sharing one dim and one normalized flag. rows is (N, dim)."""

    rows: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.rows, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"batch must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "rows", arr)

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def vector(self, i: int) -> EmbeddingVector:
        return EmbeddingVector(self.rows[i].copy(), normalized=self.normalized)


def dot(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot-product similarity between two embeddings (float64).

    Raises:
        ValueError: when the dimensions differ; the message names both dims.
    """
    if a.dim != b.dim:
        raise ValueError(f"dot: dimension mismatch ({a.dim} vs {b.dim})")
    return float(np.dot(a.values, b.values))


def l2_normalize(v: EmbeddingVector) -> EmbeddingVector:
    """Scale to unit norm; a (near-)zero vector comes back zero and unflagged.

    The zero case is deliberate: an encoder with all-zero weights must not
    crash the harness, so callers treat the unset flag as a warning signal.
    """
    norm = float(np.linalg.norm(v.values))
    if norm <= NORM_EPS:
        return EmbeddingVector(np.zeros_like(v.values), normalized=False)
    return EmbeddingVector(v.values / norm, normalized=True)


def _mix64(a: int, b: int) -> int:
    """SplitMix64-style finalizer combining two 64-bit words."""
    z = (a ^ ((b + _GOLDEN) & _MASK64)) & _MASK64
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Identical (seed, stream_id) pairs replay identical draws; `rng_fork`
    derives independent child streams without consuming parent state, so a
    tree of forks is reproducible regardless of evaluation order. Backed by
    Philox4x64, whose keyed streams are independent by construction.

    A stream is the one stateful object in the library: never share one
    across workers, fork per worker instead.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = 0
        self._gen = np.random.Generator(np.random.Philox(key=(self.seed, self.stream_id)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def beta(self, a: float, b: float) -> float:
        self.counter += 1
        return float(self._gen.beta(a, b))

    def standard_normal(self, size=None):
        self.counter += 1
        return self._gen.standard_normal(size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)


def rng_fork(parent: RngStream, label: int) -> RngStream:
    """Child stream deterministic in (parent seed, parent stream, label).

    Pure: does not advance the parent. Distinct labels, and distinct fork
    paths, give distinct streams.
    """
    return RngStream(parent.seed, _mix64(parent.stream_id, int(label) & _MASK64))


def worker_count() -> int:
    """Fan-out width for per-sample work; CLAB_THREADS caps it (default 1).

    Results never depend on the width: each sample draws from its own forked
    stream and outputs are joined in sample order.
    """
    raw = os.environ.get("CLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, min(n, os.cpu_count() or 1))
