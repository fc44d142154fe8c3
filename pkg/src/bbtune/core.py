"""Random streams, unit-sphere sampling and the small amount of vector
arithmetic shared by every other module.

Parameter vectors are plain 1-D ``float64`` numpy arrays; :func:`as_param`
is the single place that validates them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_U64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when vector dimensions are invalid or do not match."""


def as_param(values, dim: int | None = None) -> np.ndarray:
    """Return ``values`` as a finite 1-D float64 array, optionally of length ``dim``."""
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionError(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.size != dim:
        raise DimensionError(f"expected dimension {dim}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter vector has non-finite entries")
    return arr


@dataclass
class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    The stream itself advances as it is drawn from. ``fork`` derives an
    independent child stream from the key path alone, so a child's values
    never depend on how much the parent has been used.
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for v in (self.seed, self.stream_id, *self.path):
            if not 0 <= int(v) <= _U64:
                raise ValueError(f"rng key component {v} is not a 64-bit unsigned integer")
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id), *map(int, self.path)))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def fork(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen


def sample_unit_sphere(dim: int, rng: RngStream, n: int | None = None) -> np.ndarray:
    """Draw a direction uniformly from the unit sphere in ``dim`` dimensions.

    Normalizes a standard Gaussian draw. With ``n`` given, returns an
    ``(n, dim)`` array whose rows are independent directions.
    """
    if dim < 1:
        raise DimensionError(f"sphere dimension must be >= 1, got {dim}")
    shape = (dim,) if n is None else (n, dim)
    z = rng.gen.standard_normal(shape)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    # a Gaussian draw of exactly zero norm has probability zero; redraw if it happens
    while np.any(norms == 0.0):
        bad = (norms == 0.0).reshape(-1)
        z.reshape(-1, dim)[bad] = rng.gen.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / norms


def axpy(a: np.ndarray, b: np.ndarray, scalar: float) -> np.ndarray:
    """Return ``a + scalar * b``."""
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a + scalar * b


def dot(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale the last axis of ``x`` to unit Euclidean norm."""
    return x / np.linalg.norm(x, axis=-1, keepdims=True)
