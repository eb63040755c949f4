"""Positive-definite factorization shared by the receivers and the CRLB."""

from __future__ import annotations

import numpy as np
import scipy.linalg


class SingularChannelError(np.linalg.LinAlgError):
    """Raised when a Gram/covariance/Fisher matrix is not numerically positive definite."""


def cholesky(A: np.ndarray):
    """``scipy.linalg.cho_factor`` that refuses singular or indefinite input."""
    try:
        c, lower = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularChannelError(f"matrix is not positive definite: {exc}") from None
    pivots = np.abs(np.diag(c)) ** 2
    # relative pivot floor; rank-deficient inputs can survive factorization with rounding noise
    if not pivots.min() > A.shape[0] * np.finfo(float).eps * pivots.max():
        raise SingularChannelError(
            f"matrix is numerically singular (pivot ratio {pivots.min() / pivots.max():.3e})")
    return c, lower


def spd_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return scipy.linalg.cho_solve(cholesky(A), B, check_finite=False)
