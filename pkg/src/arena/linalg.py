"""Dense float64 helpers and a splittable seeded generator.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; vectors
are 1-D arrays. The helpers here add the shape checks and naming the rest
of the package relies on.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = [
    "Rng",
    "as_matrix",
    "as_vector",
    "matmul",
    "scale_columns",
    "l0_norm",
    "l1_norm",
    "random_gaussian",
    "random_uniform",
]


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(v, name="vector"):
    out = np.asarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {out.shape}")
    return out


def matmul(a, b):
    """Matrix product with an explicit error naming both shapes."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def scale_columns(m, v):
    """Return ``m @ diag(v)`` without building the diagonal matrix."""
    m = as_matrix(m)
    v = as_vector(v)
    if v.shape[0] != m.shape[1]:
        raise ShapeError(f"scale vector of length {v.shape[0]} does not match {m.shape[1]} columns")
    return m * v[None, :]


def l0_norm(v, eps=0.0):
    """Number of entries with magnitude strictly above ``eps``."""
    if eps < 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    return int(np.count_nonzero(np.abs(as_vector(v)) > eps))


def l1_norm(v):
    return float(np.sum(np.abs(as_vector(v))))


def _stream_key(stream):
    if isinstance(stream, (int, np.integer)):
        if stream < 0:
            raise ParameterError(f"stream id must be non-negative, got {stream}")
        return int(stream)
    return zlib.crc32(str(stream).encode("utf-8"))


class Rng:
    """Counter-based (Philox) generator addressed by ``(seed, stream path)``.

    ``split`` derives an independent child stream from a name or integer
    without touching the parent's state, so parallel runs and separate
    adapters can draw reproducibly without coordination.
    """

    def __init__(self, seed, _path=()):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(_path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, stream):
        return Rng(self.seed, self.path + (_stream_key(stream),))

    @property
    def generator(self):
        return self._gen

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def random_gaussian(rng, rows, cols, std=1.0):
    if std <= 0:
        raise ParameterError(f"std must be > 0, got {std}")
    if rows < 1 or cols < 1:
        raise ParameterError(f"shape must be positive, got ({rows}, {cols})")
    return rng.generator.normal(0.0, std, size=(rows, cols))


def random_uniform(rng, length, lo=-1.0, hi=1.0):
    """Draws on the half-open interval ``[lo, hi)``."""
    if not lo < hi:
        raise ParameterError(f"need lo < hi, got [{lo}, {hi})")
    if length < 0:
        raise ParameterError(f"length must be >= 0, got {length}")
    return rng.generator.uniform(lo, hi, size=length)
