"""Dense matrix helpers and Moore-Penrose pseudo-inverses.

Matrices are plain 2-D ``float64`` numpy arrays (row-major). Every exported
function validates shape and finiteness of its inputs and outputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

# Relative singular-value cutoff; tau = max(rows, cols) * sigma_max * RCOND.
RCOND = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array, raising on bad input."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1) if a.size else a.reshape(0, 0)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise ContractError("matmul overflowed to non-finite values")
    return out


def _pinv_svd(x: np.ndarray) -> np.ndarray:
    rows, cols = x.shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"pseudo-inverse needs a non-empty matrix, got {rows}x{cols}")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((cols, rows))
    tau = max(rows, cols) * s[0] * RCOND
    inv = np.where(s > tau, 1.0 / np.where(s > tau, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def pinv_left(x) -> np.ndarray:
    """Left pseudo-inverse; equals ``(X^T X)^-1 X^T`` for full column rank."""
    return _pinv_svd(as_matrix(x, "x"))


def pinv_right(x) -> np.ndarray:
    """Right pseudo-inverse; equals ``X^T (X X^T)^-1`` for full row rank.

    Computed as the transpose of the left pseudo-inverse of ``X^T`` so the two
    agree to rounding regardless of the LAPACK driver.
    """
    x = as_matrix(x, "x")
    return _pinv_svd(x.T).T
