"""Layer quantization driver.

Row plans are frozen from the original weights, then columns are quantized
left to right. Each column's rounding error is pushed onto the columns not
yet quantized through the upper Cholesky factor of the inverse Hessian, with
updates past the current block deferred until the block is done.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import quant_core as qc
from .calib_stats import HessianError, HessianState, inverse_cholesky


class Method(str, enum.Enum):
    RTN_LINEAR = "RTN_LINEAR"
    GPTQ_LINEAR = "GPTQ_LINEAR"
    GPTQ_MINMSE = "GPTQ_MINMSE"
    BCQ_PLAIN = "BCQ_PLAIN"
    GPTQ_BCQ = "GPTQ_BCQ"
    GPTQT = "GPTQT"

    @property
    def compensated(self) -> bool:
        return self not in (Method.RTN_LINEAR, Method.BCQ_PLAIN)


@dataclass(frozen=True)
class QuantMethod:
    tag: Method = Method.GPTQT
    bits: int = 3
    inter_bits: int = 5
    range_bits: int = 1
    grid_points: int = 64
    als_iters: int = 10
    clip_grid: int = 100
    objective: str = "diag"
    joint_search: bool = False
    share_codebook: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tag", Method(self.tag))

    def validate(self) -> "QuantMethod":
        if self.tag is Method.GPTQT:
            self.plan_config().validate()
        elif self.tag in (Method.BCQ_PLAIN, Method.GPTQ_BCQ):
            if self.bits < 1 or self.als_iters < 0:
                raise ValueError("binary coding needs bits >= 1 and als_iters >= 0")
        elif not 2 <= self.bits <= 8:
            raise ValueError(f"linear quantization needs 2 <= bits <= 8, got {self.bits}")
        if self.clip_grid < 1:
            raise ValueError("clip_grid must be >= 1")
        return self

    def plan_config(self) -> qc.PlanConfig:
        return qc.PlanConfig(
            n=self.inter_bits,
            m=self.bits,
            range_bits=self.range_bits,
            grid_points=self.grid_points,
            objective=self.objective,
            joint=self.joint_search,
            share_codebook=self.share_codebook,
        )


@dataclass
class QuantizedLayer:
    indices: np.ndarray  # (rows, cols) level index per weight
    plans: list
    dequantized: np.ndarray  # float32
    row_errors: np.ndarray  # diag of (W_dq - W) H (W_dq - W)^T, or plain squared error without H
    plan_seconds: float = 0.0
    quant_seconds: float = 0.0
    method: QuantMethod = field(default_factory=QuantMethod)

    @property
    def m(self) -> int:
        return int(np.log2(self.levels.shape[1]))

    @property
    def levels(self) -> np.ndarray:
        return np.stack([p.float_levels for p in self.plans])


def minmse_clip_fit(row, n: int, grid: int = 100) -> qc.LinearParams:
    """Linear fit over the range shrunk by ``gamma`` in ``1, 1 - 1/grid, ...``.

    Picks the shrink with the lowest unweighted round-trip MSE; ties keep
    the larger ``gamma``.
    """
    row = qc._as_row(row)
    if grid < 1:
        raise ValueError("grid must be >= 1")
    base = qc.fit_linear(row, n)
    if base.S == 0:
        return base
    lo, hi = float(row.min()), float(row.max())
    best, best_err = base, np.inf
    for k in range(grid):
        gamma = 1.0 - k / grid
        clo, chi = gamma * lo, gamma * hi
        p = qc.LinearParams(n, (chi - clo) / (2**n - 1), clo)
        err = float(np.mean((p.dequant(qc.quantize_linear(row, p)) - row) ** 2))
        if err < best_err:
            best, best_err = p, err
    return best


def make_plans(W, method: QuantMethod, hdiag=None, H=None) -> list:
    method.validate()
    W = np.asarray(W, dtype=np.float64)
    tag = method.tag
    if tag is Method.GPTQT:
        if hdiag is None:
            hdiag = np.ones(W.shape[1])
        return qc.build_layer_plans(W, hdiag, method.plan_config(), H)
    if tag in (Method.RTN_LINEAR, Method.GPTQ_LINEAR):
        return [qc.linear_plan(qc.fit_linear(r, method.bits)) for r in W]
    if tag is Method.GPTQ_MINMSE:
        return [qc.linear_plan(minmse_clip_fit(r, method.bits, method.clip_grid)) for r in W]
    return [qc.bc_plan(qc.bcq_als(r, method.bits, method.als_iters)[0]) for r in W]


def _nearest_rows(levels: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.abs(levels - w[:, None]).argmin(axis=1)


@dataclass
class ColumnPass:
    indices: np.ndarray
    weights: np.ndarray  # working copy: quantized prefix, compensated remainder


def gptq_columns(W, levels, hinv_chol, block: int = 128, ncols: int | None = None) -> ColumnPass:
    """Quantize the first ``ncols`` columns with error compensation.

    ``levels`` is ``rows x L``, each row sorted; ``hinv_chol`` is the upper
    factor ``U`` with ``U^T U = H^{-1}``.
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    Wk = np.array(W, dtype=np.float64)
    U = np.asarray(hinv_chol, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    rows, cols = Wk.shape
    if U.shape != (cols, cols):
        raise ValueError(f"inverse factor {U.shape} does not match {cols} columns")
    ncols = cols if ncols is None else ncols
    idx = np.zeros((rows, cols), dtype=np.int64)
    ar = np.arange(rows)
    for i1 in range(0, ncols, block):
        i2 = min(i1 + block, ncols)
        W1 = Wk[:, i1:i2].copy()
        E1 = np.zeros_like(W1)
        U1 = U[i1:i2, i1:i2]
        for i in range(i2 - i1):
            w = W1[:, i]
            j = _nearest_rows(levels, w)
            q = levels[ar, j]
            err = (w - q) / U1[i, i]
            W1[:, i:] -= err[:, None] * U1[i, i:][None, :]
            W1[:, i] = q
            E1[:, i] = err
            idx[:, i1 + i] = j
        Wk[:, i1:i2] = W1
        Wk[:, i2:] -= E1 @ U[i1:i2, i2:]
    return ColumnPass(idx, Wk)


def _row_errors(W, Wq, H=None) -> np.ndarray:
    D = np.asarray(Wq, np.float64) - np.asarray(W, np.float64)
    if H is None:
        return np.sum(D * D, axis=1)
    return np.einsum("rk,kl,rl->r", D, H, D)


def rtn_layer(W, method: QuantMethod, hess: HessianState | None = None) -> QuantizedLayer:
    """Nearest-level rounding with no compensation."""
    method.validate()
    W = np.asarray(W, dtype=np.float64)
    t0 = time.perf_counter()
    hd = np.diag(hess.H) if hess is not None and hess.finalized else None
    plans = make_plans(W, method, hdiag=hd)
    t1 = time.perf_counter()
    idx = np.stack([qc.nearest_index(r, p.float_levels) for r, p in zip(W, plans)])
    levels = np.stack([p.float_levels for p in plans])
    Wq = np.take_along_axis(levels, idx, axis=1)
    t2 = time.perf_counter()
    H = hess.H if hess is not None and hess.finalized else None
    return QuantizedLayer(
        idx, plans, Wq.astype(np.float32), _row_errors(W, Wq, H), t1 - t0, t2 - t1, method
    )


def quantize_layer(
    W,
    hess: HessianState,
    method: QuantMethod = QuantMethod(),
    block: int = 128,
    act_order: bool = False,
) -> QuantizedLayer:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    if not hess.finalized:
        raise HessianError("quantize_layer needs a finalized Hessian")
    if hess.k != W.shape[1]:
        raise ValueError(f"Hessian has {hess.k} features, weights have {W.shape[1]} columns")
    method.validate()
    if not method.tag.compensated:
        return rtn_layer(W, method, hess)

    t0 = time.perf_counter()
    plans = make_plans(W, method, hdiag=np.diag(hess.H), H=hess.H)
    levels = np.stack([p.float_levels for p in plans])
    t1 = time.perf_counter()
    if act_order:
        perm = np.argsort(-np.diag(hess.H), kind="stable")
        U = inverse_cholesky(hess.H[np.ix_(perm, perm)])
        cp = gptq_columns(W[:, perm], levels, U, block)
        idx = np.empty_like(cp.indices)
        idx[:, perm] = cp.indices
    else:
        idx = gptq_columns(W, levels, hess.hinv_chol, block).indices
    Wq = np.take_along_axis(levels, idx, axis=1)
    t2 = time.perf_counter()
    return QuantizedLayer(
        idx, plans, Wq.astype(np.float32), _row_errors(W, Wq, hess.H), t1 - t0, t2 - t1, method
    )


def proxy_loss(W, W_dq, H) -> float:
    """``tr((W_dq - W) H (W_dq - W)^T)``."""
    return float(_row_errors(W, W_dq, H).sum())


class DegenerateError(ValueError):
    pass


def layer_output_error(W, W_dq, X_val) -> float:
    """``||(W_dq - W) X|| / ||W X||`` in the Frobenius norm."""
    W = np.asarray(W, dtype=np.float64)
    W_dq = np.asarray(W_dq, dtype=np.float64)
    X = np.asarray(X_val, dtype=np.float64)
    if W.shape != W_dq.shape or W.shape[1] != X.shape[0]:
        raise ValueError(f"shape mismatch: W {W.shape}, W_dq {W_dq.shape}, X {X.shape}")
    den = np.linalg.norm(W @ X)
    if den == 0:
        raise DegenerateError("reference output W @ X is zero")
    return float(np.linalg.norm((W_dq - W) @ X) / den)
