"""Fusion of a quantized layer into pure binary coding, bit-plane packing and GQTQ I/O.

A row plan with integer codebook ``a + sum(e_i d_i)`` (``e_i`` in {0,1}),
scale ``S`` and zero-point ``z`` is rewritten with signs ``b_i = 2 e_i - 1``::

    S * level + z = beta + sum(b_i * alpha_i),
    alpha_i = S * d_i / 2,   beta = S * (a + sum(d_i) / 2) + z

Packed layout: for each row, ``m`` bit planes of ``ceil(cols / 8)`` bytes,
bit set when ``b_i = +1``, LSB-first inside each byte, pad bits zero.

GQTQ file (little-endian)::

    b"GQTQ" | u32 version=1 | u32 rows | u32 cols | u8 m
    rows x (m x f32 alpha, f32 beta)
    rows x m x ceil(cols/8) plane bytes
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quant_core import BCPlan, RowPlan

MAGIC = b"GQTQ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIB")


class PackFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FusedRow:
    m: int
    alpha_hat: np.ndarray
    beta: float

    def levels(self) -> np.ndarray:
        """All ``2**m`` reconstructable values, sorted."""
        t = np.arange(2**self.m)[:, None]
        signs = np.where((t >> np.arange(self.m)) & 1, 1.0, -1.0)
        return np.sort(self.beta + signs @ self.alpha_hat)


def fuse_plan(plan) -> FusedRow:
    if isinstance(plan, BCPlan):
        return FusedRow(plan.m, np.asarray(plan.alphas, np.float64), 0.0)
    if not isinstance(plan, RowPlan):
        raise TypeError(f"cannot fuse {type(plan).__name__}")
    if plan.codebook is None:
        return FusedRow(0, np.zeros(0), float(plan.z))
    d = np.asarray(plan.codebook.deltas, dtype=np.float64)
    alpha = plan.S_hat * d / 2.0
    beta = plan.S_hat * (plan.codebook.a + d.sum() / 2.0) + plan.z
    return FusedRow(plan.codebook.m, alpha, float(beta))


@dataclass
class PackedBCMatrix:
    rows: int
    cols: int
    m: int
    alpha_hat: np.ndarray  # (rows, m) float32
    beta: np.ndarray  # (rows,) float32
    bitplanes: np.ndarray  # (rows, m, ceil(cols/8)) uint8

    @property
    def plane_bytes(self) -> int:
        return (self.cols + 7) // 8

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedBCMatrix):
            return NotImplemented
        return (
            (self.rows, self.cols, self.m) == (other.rows, other.cols, other.m)
            and np.array_equal(self.alpha_hat, other.alpha_hat)
            and np.array_equal(self.beta, other.beta)
            and np.array_equal(self.bitplanes, other.bitplanes)
        )


def packed_nbytes(rows: int, cols: int, m: int) -> int:
    """Exact serialized size of a GQTQ file."""
    return _HEADER.size + rows * (4 * (m + 1) + m * ((cols + 7) // 8))


def pack_bits(signs: np.ndarray) -> np.ndarray:
    """``(rows, m, cols)`` 0/1 array to ``(rows, m, ceil(cols/8))`` LSB-first bytes."""
    return np.packbits(np.asarray(signs, dtype=np.uint8), axis=-1, bitorder="little")


def unpack_bits(p: PackedBCMatrix) -> np.ndarray:
    """Sign bits as ``(rows, m, cols)`` uint8, 1 meaning +1."""
    return np.unpackbits(p.bitplanes, axis=-1, count=p.cols, bitorder="little")


def pack(layer) -> PackedBCMatrix:
    """Pack a :class:`~gptqt.gptq_engine.QuantizedLayer` into bit planes.

    Rows whose plan degenerated to a single level keep zero coefficients and
    all-zero planes, so they decode to ``beta``.
    """
    plans = layer.plans
    idx = np.asarray(layer.indices)
    rows, cols = idx.shape
    fused = [fuse_plan(p) for p in plans]
    m = max((f.m for f in fused), default=0)
    alpha = np.zeros((rows, m), dtype=np.float32)
    beta = np.zeros(rows, dtype=np.float32)
    masks = np.zeros((rows, 2**m), dtype=np.int64)
    for r, (f, plan) in enumerate(zip(fused, plans)):
        beta[r] = f.beta
        if f.m == 0:
            continue
        if f.m != m:
            raise PackFormatError(f"row {r} has {f.m} bits, layer has {m}")
        alpha[r] = f.alpha_hat
        lm = np.asarray(plan.level_masks)
        if len(set(lm.tolist())) != lm.size:
            raise PackFormatError(f"row {r}: level index without a unique sign decomposition")
        masks[r] = lm
    if idx.size and (idx.min() < 0 or idx.max() >= 2**m):
        raise PackFormatError("level index out of range for the layer bit count")
    elem = np.take_along_axis(masks, idx, axis=1)
    signs = (elem[:, None, :] >> np.arange(m)[None, :, None]) & 1
    planes = pack_bits(signs) if rows else np.zeros((0, m, (cols + 7) // 8), np.uint8)
    return PackedBCMatrix(rows, cols, m, alpha, beta, planes)


def unpack_indices(p: PackedBCMatrix, plans) -> np.ndarray:
    """Recover per-weight level indices using each row's mask ordering."""
    bits = unpack_bits(p).astype(np.int64)
    elem = np.einsum("rmc,m->rc", bits, 1 << np.arange(p.m)) if p.m else np.zeros(
        (p.rows, p.cols), np.int64
    )
    out = np.zeros((p.rows, p.cols), dtype=np.int64)
    for r, plan in enumerate(plans):
        if p.m == 0 or not np.any(p.alpha_hat[r]):
            continue
        inverse = np.empty(2**p.m, dtype=np.int64)
        inverse[np.asarray(plan.level_masks)] = np.arange(2**p.m)
        out[r] = inverse[elem[r]]
    return out


def dequantize_packed(p: PackedBCMatrix) -> np.ndarray:
    bits = unpack_bits(p)
    out = np.repeat(p.beta[:, None], p.cols, axis=1).astype(np.float32)
    for i in range(p.m):
        a = p.alpha_hat[:, i : i + 1]
        out += np.where(bits[:, i].astype(bool), a, -a)
    return out


def serialize(p: PackedBCMatrix, path: str | os.PathLike) -> None:
    coef = np.concatenate([p.alpha_hat, p.beta[:, None]], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, p.rows, p.cols, p.m))
        fh.write(coef.tobytes(order="C"))
        fh.write(np.ascontiguousarray(p.bitplanes, dtype=np.uint8).tobytes(order="C"))


def deserialize(path: str | os.PathLike) -> PackedBCMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise PackFormatError(f"{path}: truncated header")
    magic, version, rows, cols, m = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise PackFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise PackFormatError(f"{path}: version {version}, expected {VERSION}")
    want = packed_nbytes(rows, cols, m)
    if len(blob) != want:
        raise PackFormatError(f"{path}: size {len(blob)} bytes, expected {want}")
    off = _HEADER.size
    coef = np.frombuffer(blob, "<f4", rows * (m + 1), off).reshape(rows, m + 1)
    off += coef.nbytes
    nb = (cols + 7) // 8
    planes = np.frombuffer(blob, np.uint8, rows * m * nb, off).reshape(rows, m, nb)
    return PackedBCMatrix(
        rows,
        cols,
        m,
        coef[:, :m].astype(np.float32),
        coef[:, m].astype(np.float32),
        planes.copy(),
    )
