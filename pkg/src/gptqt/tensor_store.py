"""GQTF tensor container and seeded synthetic weight/activation generators.

File layout (little-endian, no padding, no trailing bytes)::

    b"GQTF" | u32 version=1 | u8 ndim | ndim x u64 dims | prod(dims) x f32

Random streams come from numpy's Philox4x64-10 counter-based bit generator
keyed by the integer seed, with normals drawn by ``Generator.standard_normal``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GQTF"
VERSION = 1
_HEADER = struct.Struct("<4sIB")


class TensorFormatError(ValueError):
    """Base class for malformed GQTF content."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class TrailingBytesError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


def rng(seed: int) -> np.random.Generator:
    """Philox4x64 generator for ``seed``; the only randomness source in the package."""
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def as_tensor(t) -> np.ndarray:
    """Coerce to a C-contiguous float32 array of rank 1 or 2 and check finiteness."""
    arr = np.ascontiguousarray(t, dtype=np.float32)
    if arr.ndim not in (1, 2):
        raise ValueError(f"tensor must have 1 or 2 dims, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def write_tensor(path: str | os.PathLike, t) -> None:
    arr = as_tensor(t)  # validate before touching the file
    header = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    magic, version, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if ndim not in (1, 2):
        raise TensorFormatError(f"{path}: unsupported ndim {ndim}")
    off = _HEADER.size
    if len(blob) < off + 8 * ndim:
        raise TruncatedPayloadError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", blob, off)
    off += 8 * ndim
    count = int(np.prod(dims, dtype=np.uint64))
    need = off + 4 * count
    if len(blob) < need:
        raise TruncatedPayloadError(
            f"{path}: truncated payload ({len(blob) - off} of {4 * count} bytes)"
        )
    if len(blob) > need:
        raise TrailingBytesError(f"{path}: {len(blob) - need} trailing bytes")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    data = data.astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: non-finite element in payload")
    return data


def gen_weights(rows: int, cols: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """Gaussian ``rows x cols`` matrix with mean 0 and standard deviation ``scale``."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    z = rng(seed).standard_normal((rows, cols))
    return (scale * z).astype(np.float32)


def gen_activations(cols: int, nsamples: int, seed: int, rho: float = 0.0) -> np.ndarray:
    """Feature-major ``cols x nsamples`` activations, AR(1) along the feature axis.

    Each feature has unit variance and features ``i`` and ``i+1`` have
    correlation ``rho``, so ``X @ X.T`` is non-diagonal whenever ``rho > 0``.
    """
    if cols < 1 or nsamples < 1:
        raise ValueError("cols and nsamples must be >= 1")
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")
    e = rng(seed).standard_normal((cols, nsamples))
    x = np.empty_like(e)
    x[0] = e[0]
    innov = np.sqrt(1.0 - rho * rho)
    for i in range(1, cols):
        x[i] = rho * x[i - 1] + innov * e[i]
    return x.astype(np.float32)
