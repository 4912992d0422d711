"""Small symmetric-matrix helpers that broadcast over leading axes."""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

PSD_TOL = 1e-8


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def sym_sqrt(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix (stack).

    Eigenvalues in ``[-tol, 0)`` are clipped to zero; anything more negative
    is rejected.
    """
    a = np.asarray(a, dtype=float)
    w, v = np.linalg.eigh(symmetrize(a))
    if np.any(w < -max(tol, tol * np.abs(w).max(initial=0.0))):
        raise NumericalError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def sym_inv_sqrt(a: np.ndarray) -> np.ndarray:
    """Inverse principal square root of a symmetric positive definite matrix (stack)."""
    w, v = np.linalg.eigh(symmetrize(np.asarray(a, dtype=float)))
    if np.any(w <= 0):
        raise NumericalError("matrix is not positive definite")
    return (v / np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def clip_psd(q: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetrize and clip slightly negative eigenvalues of a covariance stack.

    Eigenvalues below ``-tol`` mean the integration went wrong and raise.
    """
    q = symmetrize(q)
    if q.shape[-1] == 1:
        if np.any(q < -tol):
            raise NumericalError(f"covariance became negative ({q.min():.3e})")
        return np.maximum(q, 0.0)
    w, v = np.linalg.eigh(q)
    if np.any(w < -tol):
        raise NumericalError(f"covariance lost positive semi-definiteness ({w.min():.3e})")
    if np.any(w < 0):
        w = np.clip(w, 0.0, None)
        q = symmetrize((v * w[..., None, :]) @ np.swapaxes(v, -1, -2))
    return q


def row_sum_norm(a: np.ndarray) -> np.ndarray:
    """Operator norm induced by the max norm (maximum absolute row sum)."""
    return np.abs(a).sum(axis=-1).max(axis=-1)
