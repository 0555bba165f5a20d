"""Per-row quantization math.

Covers linear quantization, the greedy and alternating-least-squares
binary-coding baselines, enumeration of binary-coding codebooks over an
intermediate integer grid, the two-step codebook search and the scale
re-exploration that follows it.

Conventions used throughout:

* a linear grid dequantizes as ``S * q + z`` with ``z`` in weight units, so
  ``q = round((w - z) / S)``; the offset form ``round(w / S - qbias)`` maps
  over with ``qbias = z / S``;
* linear rounding is half away from zero; codebook rounding breaks ties
  toward the smaller level;
* ``sign(0) = +1`` for binary coding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterator, Sequence

import numpy as np

MAX_ENUM_BITS = 6
_CHUNK_ELEMS = 4_000_000


def _as_row(row) -> np.ndarray:
    arr = np.asarray(row, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("row must be non-empty")
    return arr


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


# --------------------------------------------------------------------------
# linear quantization


@dataclass(frozen=True)
class LinearParams:
    n: int
    S: float
    z: float

    @property
    def qmax(self) -> int:
        return 2**self.n - 1

    def dequant(self, q) -> np.ndarray:
        return self.S * np.asarray(q, dtype=np.float64) + self.z


def fit_linear(row, n: int) -> LinearParams:
    row = _as_row(row)
    if not 2 <= n <= 8:
        raise ValueError(f"bit count {n} outside 2..8")
    lo, hi = float(row.min()), float(row.max())
    if hi == lo:
        return LinearParams(n, 0.0, lo)
    return LinearParams(n, (hi - lo) / (2**n - 1), lo)


def quantize_linear(row, p: LinearParams) -> np.ndarray:
    row = _as_row(row)
    if p.S == 0:
        return np.zeros(row.size, dtype=np.int64)
    q = round_half_away((row - p.z) / p.S)
    return np.clip(q, 0, p.qmax).astype(np.int64)


# --------------------------------------------------------------------------
# binary coding baselines


def _signs(r: np.ndarray) -> np.ndarray:
    return np.where(r >= 0, 1.0, -1.0)


def greedy_bc(row, nbits: int) -> tuple[np.ndarray, np.ndarray]:
    """Residual binarization: returns ``alphas`` (nbits,) and ``bits`` (nbits, len)."""
    r = _as_row(row).copy()
    if nbits < 1:
        raise ValueError("nbits must be >= 1")
    alphas = np.empty(nbits)
    bits = np.empty((nbits, r.size))
    for i in range(nbits):
        b = _signs(r)
        a = float(r @ b) / r.size
        r -= a * b
        alphas[i] = a
        bits[i] = b
    return alphas, bits


def bc_dequant(alphas, bits) -> np.ndarray:
    return np.asarray(alphas) @ np.asarray(bits)


@lru_cache(maxsize=None)
def _sign_codes(nbits: int) -> np.ndarray:
    """All ``2**nbits`` sign vectors, row ``t`` has +1 where bit ``i`` of ``t`` is set."""
    t = np.arange(2**nbits)[:, None]
    return np.where((t >> np.arange(nbits)) & 1, 1.0, -1.0)


def bcq_als_steps(row, nbits: int, iters: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield the greedy start, then the state after every full ALS iteration."""
    w = _as_row(row)
    alphas, bits = greedy_bc(w, nbits)
    yield alphas.copy(), bits.copy()
    codes = _sign_codes(nbits)
    for _ in range(iters):
        values = codes @ alphas
        pick = np.abs(w[:, None] - values[None, :]).argmin(axis=1)
        bits = codes[pick].T.copy()
        B = bits.T
        if np.linalg.matrix_rank(B.T @ B) < nbits:
            yield alphas.copy(), bits
            return
        alphas = np.linalg.solve(B.T @ B, B.T @ w)
        yield alphas.copy(), bits.copy()


def bcq_als(row, nbits: int, iters: int = 10) -> tuple[np.ndarray, np.ndarray]:
    if iters < 0:
        raise ValueError("iters must be >= 0")
    for state in bcq_als_steps(row, nbits, iters):
        pass
    return state


# --------------------------------------------------------------------------
# codebooks over the intermediate integer grid


def _subset_sums(deltas: Sequence[int]) -> list[int]:
    sums = [0]
    for d in deltas:
        sums = sums + [s + d for s in sums]
    return sums


@dataclass(frozen=True)
class Codebook:
    """``2**m`` integer levels ``a + sum(e_i * d_i)``, ``e_i`` in {0, 1}."""

    a: int
    deltas: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(int(d) for d in self.deltas))
        if self.a < 0 or any(d <= 0 for d in self.deltas):
            raise ValueError("codebook base must be >= 0 and deltas > 0")
        if len(set(_subset_sums(self.deltas))) != 2**self.m:
            raise ValueError(f"deltas {self.deltas} have colliding subset sums")

    @property
    def m(self) -> int:
        return len(self.deltas)

    @property
    def top(self) -> int:
        return self.a + sum(self.deltas)

    @cached_property
    def _ordered(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        sums = _subset_sums(self.deltas)
        order = sorted(range(len(sums)), key=lambda t: sums[t])
        return tuple(self.a + sums[t] for t in order), tuple(order)

    @property
    def levels(self) -> tuple[int, ...]:
        return self._ordered[0]

    @property
    def level_masks(self) -> tuple[int, ...]:
        """Bit ``i`` of ``level_masks[j]`` is set when sorted level ``j`` uses ``d_i``."""
        return self._ordered[1]

    def fits(self, n: int) -> bool:
        return self.top <= 2**n - 1


def full_grid_codebook(n: int) -> Codebook:
    """The uniform ``n``-bit grid 0..2**n-1 written as a binary-coding tree."""
    return Codebook(0, tuple(2**i for i in range(n)))


def _check_enum(n: int, m: int) -> None:
    if not (1 <= m < n <= MAX_ENUM_BITS):
        raise ValueError(f"codebook enumeration needs 1 <= m < n <= {MAX_ENUM_BITS}, got n={n}, m={m}")


@lru_cache(maxsize=None)
def enumerate_codebooks(n: int, m: int) -> tuple[Codebook, ...]:
    """Every distinct ``m``-bit codebook inside ``0..2**n-1``.

    Order: deltas in lexicographic non-decreasing order, then base ``a``
    ascending. Level sets reachable from several delta tuples are kept once,
    at their first occurrence.
    """
    _check_enum(n, m)
    top = 2**n - 1
    seen: set[tuple[int, ...]] = set()
    out: list[Codebook] = []

    def rec(prefix: list[int], start: int, budget: int):
        if len(prefix) == m:
            sums = _subset_sums(prefix)
            if len(set(sums)) != len(sums):
                return
            span = sum(prefix)
            base = sorted(sums)
            for a in range(top - span + 1):
                key = tuple(a + s for s in base)
                if key not in seen:
                    seen.add(key)
                    out.append(Codebook(a, tuple(prefix)))
            return
        slots = m - len(prefix)
        for d in range(start, budget // slots + 1):
            rec(prefix + [d], d, budget - d)

    rec([], 1, top)
    return tuple(out)


@dataclass(frozen=True)
class _Table:
    top: int
    levels: np.ndarray  # (C, L) int
    edges: np.ndarray  # (C, L+1) indices into the half-unit cumulative sums


@lru_cache(maxsize=None)
def _codebook_table(n: int, m: int) -> _Table:
    top = 2**n - 1
    levels = np.array([cb.levels for cb in enumerate_codebooks(n, m)], dtype=np.int64)
    inner = levels[:, :-1] + levels[:, 1:]  # twice the decision boundary
    C = levels.shape[0]
    edges = np.concatenate(
        [np.zeros((C, 1), np.int64), inner, np.full((C, 1), 2 * top, np.int64)], axis=1
    )
    return _Table(top, levels, edges)


def round_to_codebook(ints, cb: Codebook | Sequence[int]) -> np.ndarray:
    levels = np.asarray(cb.levels if isinstance(cb, Codebook) else cb)
    idx = nearest_index(np.asarray(ints), levels)
    return levels[idx]


def nearest_index(values, levels) -> np.ndarray:
    """Index of the nearest entry of sorted ``levels``; ties go to the smaller level."""
    levels = np.asarray(levels)
    values = np.asarray(values)
    hi = np.searchsorted(levels, values, side="left")
    hi = np.clip(hi, 0, levels.size - 1)
    lo = np.clip(hi - 1, 0, levels.size - 1)
    take_hi = (levels[hi] - values) < (values - levels[lo])
    return np.where(take_hi, hi, lo)


def row_proxy_error(row, plan_levels, hdiag) -> float:
    row = _as_row(row)
    levels = np.sort(np.asarray(plan_levels, dtype=np.float64))
    h = np.asarray(hdiag, dtype=np.float64)
    if h.shape != row.shape:
        raise ValueError("hdiag must match the row length")
    d = levels[nearest_index(row, levels)] - row
    return float(np.sum(d * d * h))


def full_proxy_error(row, plan_levels, H) -> float:
    """``d H d^T`` with ``d`` the nearest-level rounding error of the row."""
    row = _as_row(row)
    levels = np.sort(np.asarray(plan_levels, dtype=np.float64))
    d = levels[nearest_index(row, levels)] - row
    return float(d @ np.asarray(H, dtype=np.float64) @ d)


def _bucket_costs(u: np.ndarray, h: np.ndarray, table: _Table) -> np.ndarray:
    """``sum_j h_j (u_j - nearest level)^2`` for every row of ``u`` and every codebook.

    Every decision boundary of an integer codebook is a multiple of 1/2, so
    the weights are binned at that resolution once per row and each
    candidate costs ``O(2**m)`` lookups into cumulative sums.
    """
    r = u.shape[0]
    E = 2 * table.top + 1
    t = np.clip(np.floor(2.0 * u) + 1, 1, 2 * table.top).astype(np.int64)
    flat = (t + (np.arange(r) * E)[:, None]).ravel()
    cums = []
    for weight in (h, h * u, h * u * u):
        hist = np.bincount(flat, weights=weight.ravel(), minlength=r * E).reshape(r, E)
        cums.append(np.cumsum(hist, axis=1))
    C, L1 = table.edges.shape
    L = table.levels.astype(np.float64)
    out = np.empty((r, C))
    step = max(1, _CHUNK_ELEMS // (C * L1))
    for s in range(0, r, step):
        seg = [np.diff(c[s : s + step][:, table.edges], axis=2) for c in cums]
        out[s : s + step] = (
            seg[2].sum(axis=2)
            - 2.0 * np.einsum("rcl,cl->rc", seg[1], L)
            + np.einsum("rcl,cl->rc", seg[0], L * L)
        )
    return out


def _first_min(costs: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Row-wise argmin preferring the earliest candidate among float-noise ties."""
    best = costs.min(axis=1, keepdims=True)
    tol = 1e-12 * scale[:, None] + 1e-300
    return np.argmax(costs <= best + tol, axis=1)


def _positions(rows: np.ndarray, S: np.ndarray, z: np.ndarray) -> np.ndarray:
    return (rows - z[:, None]) / S[:, None]


def _full_costs(row: np.ndarray, H: np.ndarray, p: LinearParams, table: _Table) -> np.ndarray:
    costs = np.empty(table.levels.shape[0])
    step = max(1, _CHUNK_ELEMS // (row.size * 4))
    for s in range(0, costs.size, step):
        lv = p.S * table.levels[s : s + step].astype(np.float64) + p.z
        idx = np.abs(row[None, :, None] - lv[:, None, :]).argmin(axis=2)
        d = np.take_along_axis(lv, idx, axis=1) - row[None, :]
        costs[s : s + step] = np.einsum("ck,kl,cl->c", d, H, d)
    return costs


def search_codebook(
    row, hdiag, p: LinearParams, m: int, objective: str = "diag", H=None
) -> Codebook:
    """Codebook minimizing the proxy error of levels ``S * level + z``."""
    row = _as_row(row)
    if m >= p.n:
        raise ValueError("final bits must be below the intermediate bits")
    table = _codebook_table(p.n, m)
    books = enumerate_codebooks(p.n, m)
    if p.S == 0:
        return books[0]
    if objective == "full":
        if H is None:
            raise ValueError("full objective needs the Hessian")
        costs = _full_costs(row, np.asarray(H, np.float64), p, table)[None, :]
        scale = np.array([abs(costs).max()])
    else:
        h = np.asarray(hdiag, dtype=np.float64)[None, :]
        u = _positions(row[None, :], np.array([p.S]), np.array([p.z]))
        costs = _bucket_costs(u, h, table)
        scale = (h * (u * u + table.top**2)).sum(axis=1)
    return books[int(_first_min(costs, scale)[0])]


def reexplore_interval(span: float, n: int, range_bits: int) -> tuple[float, float]:
    """Closed scale interval from ``n + range_bits`` down to ``n - range_bits`` bits.

    The coarse end is capped at 1 bit (denominator 1) when ``n - range_bits < 1``.
    """
    lo_bits = n + range_bits
    hi_bits = max(n - range_bits, 1)
    return span / (2**lo_bits - 1), span / (2**hi_bits - 1)


def _scale_grid(row: np.ndarray, p: LinearParams, range_bits: int, grid_points: int) -> np.ndarray:
    lo, hi = reexplore_interval(float(row.max() - row.min()), p.n, range_bits)
    return np.concatenate([[p.S], np.linspace(lo, hi, grid_points)])


def _scale_errors(row, h, levels_int, z, scales, H=None) -> np.ndarray:
    lv = scales[:, None] * np.asarray(levels_int, np.float64)[None, :] + z
    idx = np.abs(row[None, :, None] - lv[:, None, :]).argmin(axis=2)
    d = np.take_along_axis(lv, idx, axis=1) - row[None, :]
    if H is not None:
        return np.einsum("gk,kl,gl->g", d, H, d)
    return (d * d * h[None, :]).sum(axis=1)


def reexplore_scale(
    row,
    hdiag,
    cb: Codebook,
    p: LinearParams,
    range_bits: int,
    grid_points: int = 64,
    objective: str = "diag",
    H=None,
) -> float:
    """Grid-search a replacement scale with the codebook and zero-point held fixed.

    The base scale is always a candidate and wins every tie, so the result
    never scores worse than ``p.S``.
    """
    row = _as_row(row)
    if grid_points < 1:
        raise ValueError("grid_points must be >= 1")
    if range_bits < 0:
        raise ValueError("range_bits must be >= 0")
    if range_bits == 0 or p.S == 0:
        return p.S
    h = np.asarray(hdiag, dtype=np.float64)
    Hf = np.asarray(H, np.float64) if objective == "full" else None
    scales = _scale_grid(row, p, range_bits, grid_points)
    errs = _scale_errors(row, h, cb.levels, p.z, scales, Hf)
    best = int(np.argmin(errs))
    if best == 0:
        return p.S
    score = (lambda lv: full_proxy_error(row, lv, Hf)) if Hf is not None else (
        lambda lv: row_proxy_error(row, lv, h)
    )
    lv_int = np.asarray(cb.levels, np.float64)
    if score(scales[best] * lv_int + p.z) < score(p.S * lv_int + p.z):
        return float(scales[best])
    return p.S


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class PlanConfig:
    n: int = 5
    m: int = 3
    range_bits: int = 1
    grid_points: int = 64
    objective: str = "diag"  # "diag" or "full"
    joint: bool = False
    share_codebook: bool = False

    def validate(self) -> "PlanConfig":
        if not 1 <= self.m < self.n:
            raise ValueError(f"final bits m={self.m} must satisfy 1 <= m < n={self.n}")
        if self.n > MAX_ENUM_BITS:
            raise ValueError(f"intermediate bits n={self.n} exceeds {MAX_ENUM_BITS}")
        if self.range_bits < 0 or self.grid_points < 1:
            raise ValueError("range_bits must be >= 0 and grid_points >= 1")
        if self.objective not in ("diag", "full"):
            raise ValueError(f"unknown objective {self.objective!r}")
        return self


@dataclass(frozen=True)
class RowPlan:
    n: int
    m: int
    S_hat: float
    z: float
    codebook: Codebook | None
    S: float = 0.0
    degenerate: bool = False
    float_levels: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.codebook is None:
            lv = np.full(2**self.m, self.z, dtype=np.float64)
        else:
            lv = self.S_hat * np.asarray(self.codebook.levels, np.float64) + self.z
        lv.setflags(write=False)
        object.__setattr__(self, "float_levels", lv)

    @property
    def level_masks(self) -> np.ndarray:
        if self.codebook is None:
            return np.zeros(2**self.m, dtype=np.int64)
        return np.asarray(self.codebook.level_masks, dtype=np.int64)


@dataclass(frozen=True)
class BCPlan:
    """Levels ``sum(+-alpha_i)`` of a plain binary-coding fit, ``alphas`` ascending and >= 0."""

    alphas: tuple[float, ...]

    @property
    def m(self) -> int:
        return len(self.alphas)

    @cached_property
    def _ordered(self):
        vals = _sign_codes(self.m) @ np.asarray(self.alphas)
        order = np.argsort(vals, kind="stable")
        return vals[order], order

    @property
    def float_levels(self) -> np.ndarray:
        return self._ordered[0]

    @property
    def level_masks(self) -> np.ndarray:
        return self._ordered[1].astype(np.int64)


def bc_plan(alphas) -> BCPlan:
    return BCPlan(tuple(sorted(float(abs(a)) for a in alphas)))


def linear_plan(p: LinearParams) -> RowPlan:
    """A linear grid as a plan whose codebook is the full ``n``-bit tree."""
    if p.S == 0:
        return RowPlan(p.n, p.n, 0.0, p.z, None, S=0.0, degenerate=True)
    return RowPlan(p.n, p.n, p.S, p.z, full_grid_codebook(p.n), S=p.S)


def build_layer_plans(W, hdiag, cfg: PlanConfig = PlanConfig(), H=None) -> list[RowPlan]:
    """Row-wise two-step plans for a whole ``rows x cols`` matrix.

    Per row: linear fit at ``n`` bits, codebook search at the base scale,
    then scale re-exploration with that codebook fixed. With ``joint`` the
    codebook is searched afresh at every candidate scale instead; with
    ``share_codebook`` one codebook is chosen for all rows.
    """
    cfg.validate()
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    h = np.asarray(hdiag, dtype=np.float64)
    if h.shape != (W.shape[1],):
        raise ValueError("hdiag length must equal the column count")
    if cfg.objective == "full" and H is None:
        raise ValueError("full objective needs the Hessian")
    params = [fit_linear(r, cfg.n) for r in W]
    books = enumerate_codebooks(cfg.n, cfg.m)
    table = _codebook_table(cfg.n, cfg.m)
    live = np.array([p.S > 0 for p in params])

    plans: list[RowPlan | None] = [None] * W.shape[0]
    for i in np.flatnonzero(~live):
        plans[i] = RowPlan(cfg.n, cfg.m, 0.0, params[i].z, None, S=0.0, degenerate=True)
    if not live.any():
        return plans

    rows = W[live]
    S = np.array([p.S for p in params if p.S > 0])
    z = np.array([p.z for p in params if p.S > 0])
    live_idx = np.flatnonzero(live)

    if cfg.joint and cfg.range_bits > 0:
        for j, i in enumerate(live_idx):
            cb, s_hat = _joint_search(rows[j], h, params[i], cfg, books, table, H)
            plans[i] = RowPlan(cfg.n, cfg.m, s_hat, params[i].z, cb, S=params[i].S)
        return plans

    if cfg.objective == "full":
        costs = np.stack([_full_costs(r, np.asarray(H, np.float64), params[i], table)
                          for r, i in zip(rows, live_idx)])
        scale = np.abs(costs).max(axis=1)
    else:
        u = _positions(rows, S, z)
        hh = np.broadcast_to(h, rows.shape)
        costs = _bucket_costs(u, hh, table) * (S * S)[:, None]
        scale = (hh * (u * u + table.top**2)).sum(axis=1) * S * S

    if cfg.share_codebook:
        total = costs.sum(axis=0, keepdims=True)
        choice = np.repeat(_first_min(total, np.array([scale.sum()])), rows.shape[0])
    else:
        choice = _first_min(costs, scale)

    for j, i in enumerate(live_idx):
        cb = books[int(choice[j])]
        s_hat = reexplore_scale(
            rows[j], h, cb, params[i], cfg.range_bits, cfg.grid_points, cfg.objective, H
        )
        plans[i] = RowPlan(cfg.n, cfg.m, s_hat, params[i].z, cb, S=params[i].S)
    return plans


def _joint_search(row, h, p, cfg, books, table, H):
    scales = _scale_grid(row, p, cfg.range_bits, cfg.grid_points)
    best = (np.inf, 0, 0)
    for g, s in enumerate(scales):
        u = (row[None, :] - p.z) / s
        if cfg.objective == "full":
            costs = _full_costs(row, np.asarray(H, np.float64), LinearParams(p.n, s, p.z), table)
        else:
            costs = _bucket_costs(u, h[None, :], table)[0] * s * s
        c = int(np.argmin(costs))
        if costs[c] < best[0]:
            best = (costs[c], g, c)
    return books[best[2]], float(scales[best[1]])


def build_row_plan(row, hdiag, cfg: PlanConfig = PlanConfig(), H=None) -> RowPlan:
    return build_layer_plans(_as_row(row)[None, :], hdiag, cfg, H)[0]


def plan_proxy_error(row, plan, hdiag) -> float:
    return row_proxy_error(row, plan.float_levels, hdiag)

