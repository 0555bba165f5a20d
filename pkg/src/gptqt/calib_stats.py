"""Layer-wise proxy Hessian ``H = 2 X X^T`` with damping and inverse-Cholesky factor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

MAX_FEATURES = 8192
DEFAULT_DAMP = 0.01


class HessianError(RuntimeError):
    pass


@dataclass
class HessianState:
    k: int
    H: np.ndarray
    nsamples: int = 0
    damping_lambda: float = 0.0
    hinv_chol: np.ndarray | None = None

    @classmethod
    def empty(cls, k: int, max_features: int = MAX_FEATURES) -> "HessianState":
        if k < 1:
            raise ValueError("feature count must be >= 1")
        if k > max_features:
            raise ValueError(f"feature count {k} exceeds cap {max_features}")
        return cls(k=k, H=np.zeros((k, k), dtype=np.float64))

    @property
    def finalized(self) -> bool:
        return self.hinv_chol is not None


def accumulate(state: HessianState, X) -> HessianState:
    """Add ``2 X X^T`` for a ``k x m`` activation batch."""
    if state.finalized:
        raise HessianError("accumulate after finalize")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != state.k:
        raise ValueError(f"expected activations with {state.k} rows, got shape {X.shape}")
    state.H += 2.0 * (X @ X.T)
    state.nsamples += X.shape[1]
    return state


def inverse_cholesky(H: np.ndarray) -> np.ndarray:
    """Upper factor ``U`` with ``U^T U = H^{-1}`` for a positive definite ``H``."""
    try:
        low = linalg.cholesky(H, lower=True)
        hinv = linalg.cho_solve((low, True), np.eye(H.shape[0]))
        hinv = 0.5 * (hinv + hinv.T)
        return linalg.cholesky(hinv, lower=False)
    except linalg.LinAlgError as exc:
        raise HessianError("Hessian not positive definite; raise damp_pct") from exc


def finalize(state: HessianState, damp_pct: float = DEFAULT_DAMP) -> HessianState:
    if state.finalized:
        raise HessianError("state already finalized")
    if state.nsamples < 1:
        raise HessianError("no calibration samples accumulated")
    if damp_pct <= 0:
        raise ValueError("damp_pct must be > 0")
    H = 0.5 * (state.H + state.H.T)
    lam = damp_pct * float(np.mean(np.diag(H)))
    H[np.diag_indices_from(H)] += lam
    state.hinv_chol = inverse_cholesky(H)
    state.H = H
    state.H.setflags(write=False)
    state.hinv_chol.setflags(write=False)
    state.damping_lambda = lam
    return state


def hdiag(state: HessianState) -> np.ndarray:
    if not state.finalized:
        raise HessianError("hdiag requires a finalized state")
    return np.diag(state.H).copy()


def from_activations(X, damp_pct: float = DEFAULT_DAMP) -> HessianState:
    """One-shot accumulate + finalize for a single calibration batch."""
    X = np.asarray(X)
    return finalize(accumulate(HessianState.empty(X.shape[0]), X), damp_pct)
