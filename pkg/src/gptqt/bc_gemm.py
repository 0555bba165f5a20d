"""Matrix-vector products straight from packed binary-coding weights.

For each group of ``g`` activations a table of all ``2**g`` signed partial
sums is built once per input vector; every packed plane chunk is then an
index into that table. With ``g = 8`` a plane byte is the index itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fuse_pack import PackedBCMatrix, dequantize_packed, pack_bits, unpack_bits
from .tensor_store import rng

DEFAULT_GROUP = 8


@dataclass
class GroupLUT:
    group_size: int
    tables: np.ndarray  # (groups, 2**group_size) float32
    additions: int  # per group, spent in the doubling passes

    @property
    def groups(self) -> int:
        return self.tables.shape[0]


def build_lut(x, group_size: int = DEFAULT_GROUP) -> GroupLUT:
    """``table[g, t] = sum_j s(t, j) x[g*gs + j]`` with ``s = +1`` where bit ``j`` of ``t`` is set.

    Entry 0 starts at ``-sum(x_group)``; pass ``j`` fills entries with top
    bit ``j`` from the lower half by adding ``2 x_j``, which takes
    ``2**group_size - 1`` additions per group in total.
    """
    if not 4 <= group_size <= 16:
        raise ValueError("group_size must lie in 4..16")
    x = np.asarray(x, dtype=np.float32).ravel()
    G = max(1, -(-x.size // group_size))
    xg = np.zeros(G * group_size, dtype=np.float32)
    xg[: x.size] = x
    xg = xg.reshape(G, group_size)
    tables = np.empty((G, 2**group_size), dtype=np.float32)
    tables[:, 0] = -xg.sum(axis=1)
    twice = 2.0 * xg
    adds = 0
    for j in range(group_size):
        span = 1 << j
        tables[:, span : 2 * span] = tables[:, :span] + twice[:, j : j + 1]
        adds += span
    return GroupLUT(group_size, tables, adds)


def _group_indices(p: PackedBCMatrix, group_size: int) -> np.ndarray:
    if group_size == 8:
        return p.bitplanes.astype(np.intp)
    G = -(-p.cols // group_size)
    bits = np.zeros((p.rows, p.m, G * group_size), dtype=np.intp)
    bits[..., : p.cols] = unpack_bits(p)
    bits = bits.reshape(p.rows, p.m, G, group_size)
    return (bits << np.arange(group_size)).sum(axis=-1)


def _check_x(p: PackedBCMatrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32).ravel()
    if x.size != p.cols:
        raise ValueError(f"vector length {x.size} does not match {p.cols} columns")
    return x


def matvec_lut(p: PackedBCMatrix, x, group_size: int = DEFAULT_GROUP) -> np.ndarray:
    x = _check_x(p, x)
    offset = p.beta * np.float32(x.sum())
    if p.m == 0 or p.rows == 0:
        return offset.astype(np.float32)
    lut = build_lut(x, group_size)
    flat = lut.tables.ravel()
    base = (np.arange(lut.groups, dtype=np.intp) << group_size)
    idx = _group_indices(p, group_size)
    partial = np.empty((p.rows, p.m), dtype=np.float32)
    for i in range(p.m):
        partial[:, i] = np.take(flat, idx[:, i, :] + base).sum(axis=1)
    return (np.einsum("rm,rm->r", p.alpha_hat, partial) + offset).astype(np.float32)


def matvec_reference(p: PackedBCMatrix, x) -> np.ndarray:
    x = _check_x(p, x)
    return dequantize_packed(p) @ x


def random_packed(rows: int, cols: int, m: int, seed: int) -> PackedBCMatrix:
    """Seeded packed matrix with positive ascending coefficients and uniform sign bits."""
    g = rng(seed)
    alpha = np.sort(g.uniform(0.01, 1.0, size=(rows, m)), axis=1).astype(np.float32)
    beta = g.normal(0.0, 0.1, size=rows).astype(np.float32)
    bits = g.integers(0, 2, size=(rows, m, cols), dtype=np.uint8)
    return PackedBCMatrix(rows, cols, m, alpha, beta, pack_bits(bits))


def _rel_err(y, ref) -> float:
    scale = float(np.max(np.abs(ref))) if np.size(ref) else 0.0
    return float(np.max(np.abs(np.asarray(y) - ref))) / scale if scale else float(np.max(np.abs(y), initial=0.0))


def _median_time(fn, reps: int) -> float:
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


PATHS = ("dense", "dequant", "lut")


def bench(sizes, m: int = 3, reps: int = 5, seed: int = 0, tol: float = 1e-4) -> list[dict]:
    """Median wall time of dense float, dequantize-then-multiply and LUT matvec per size.

    All three paths are cross-checked against each other before any timing.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    out = []
    for k, (rows, cols) in enumerate(sizes):
        p = random_packed(rows, cols, m, seed + k)
        x = rng(seed + 1000 + k).standard_normal(cols).astype(np.float32)
        W = dequantize_packed(p)
        y_dense = W @ x
        y_deq = matvec_reference(p, x)
        y_lut = matvec_lut(p, x)
        agree = max(_rel_err(y_deq, y_dense), _rel_err(y_lut, y_dense))
        if agree > tol:
            raise AssertionError(f"{rows}x{cols}: kernel paths disagree (rel err {agree:.2e})")
        times = {
            "dense": _median_time(lambda: W @ x, reps),
            "dequant": _median_time(lambda: matvec_reference(p, x), reps),
            "lut": _median_time(lambda: matvec_lut(p, x), reps),
        }
        for path in PATHS:
            out.append(
                {
                    "rows": rows,
                    "cols": cols,
                    "bits": m,
                    "path": path,
                    "median_s": times[path],
                    "speedup_vs_dequant": times["dequant"] / times[path],
                    "max_rel_err": agree,
                }
            )
    return out
