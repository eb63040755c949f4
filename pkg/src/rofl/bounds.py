"""Estimation and convergence bounds.

* Fisher information / CRLB for estimating the per-client symbol vector from
  one received slot.
* The one-step contraction and the O(1/t) optimality-gap bound for parallel
  SGD (one local step per round) aggregated by random orthogonalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._linalg import cholesky


@dataclass(frozen=True)
class CrlbResult:
    """Fisher matrix, its inverse, and two scalar floors.

    ``mse_floor`` is ``trace(crlb)`` and bounds ``E||x - x_hat||^2`` for the
    per-client vector; ``sum_floor`` is ``1^T crlb 1`` and bounds the variance
    of any unbiased estimator of ``sum_k x_k``.
    """

    fim: np.ndarray
    crlb: np.ndarray
    mse_floor: float
    sum_floor: float


def crlb(H: np.ndarray, snr: float) -> CrlbResult:
    """CRLB for real symbols ``x`` observed as ``y = H x + n``, ``n ~ CN(0, I/snr)``."""
    if not (snr > 0 and np.isfinite(snr)):
        raise ValueError(f"snr must be positive and finite, got {snr}")
    H = np.asarray(H)
    fim = 2.0 * snr * np.real(H.conj().T @ H)
    fim = 0.5 * (fim + fim.T)
    factor = cholesky(fim)
    C = scipy.linalg.cho_solve(factor, np.eye(fim.shape[0]), check_finite=False)
    C = 0.5 * (C + C.T)
    return CrlbResult(fim=fim, crlb=C, mse_floor=float(np.trace(C)), sum_floor=float(C.sum()))


def crlb_floors_batch(H: np.ndarray, snr: float) -> tuple[np.ndarray, np.ndarray]:
    """``(trace C, 1^T C 1)`` for a stack of channels ``H[t]`` of shape ``(T, M, K)``."""
    G = np.real(np.einsum("tmk,tml->tkl", H.conj(), H))
    K = G.shape[-1]
    L = np.linalg.cholesky(2.0 * snr * G)
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(K), G.shape))
    trace = np.sum(Linv ** 2, axis=(1, 2))
    ones = Linv.sum(axis=2)
    return trace, np.sum(ones ** 2, axis=1)


@dataclass(frozen=True)
class BoundParams:
    """Constants for the one-step and convergence bounds.

    ``grad_bound`` is ``H`` in ``E||grad||^2 <= H^2``; ``w0_dist_sq`` is
    ``||w_0 - w*||^2``.
    """

    mu: float
    lip: float
    grad_bound: float
    K: int
    M: int
    snr: float
    gamma: float = 0.0
    w0_dist_sq: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.lip >= self.mu:
            raise ValueError(f"need lip >= mu, got lip={self.lip}, mu={self.mu}")
        if self.grad_bound < 0 or self.w0_dist_sq < 0:
            raise ValueError("grad_bound and w0_dist_sq must be non-negative")
        if self.K < 1 or self.M < 1 or not self.snr > 0:
            raise ValueError("need K >= 1, M >= 1 and snr > 0")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")

    @property
    def B(self) -> float:
        return b_factor(self.K, self.M, self.snr, self.grad_bound)


def b_factor(K: int, M: int, snr: float, grad_bound: float) -> float:
    """``[1 + (K + 1/snr)/M] * H^2 / K``: variance reduction plus channel interference."""
    if K < 1 or M < 1 or not snr > 0:
        raise ValueError("need K >= 1, M >= 1 and snr > 0")
    return (1.0 + (K + 1.0 / snr) / M) * grad_bound ** 2 / K


def lemma1_rhs(prev_err_sq: float, eta_t: float, params: BoundParams) -> float:
    """One-step bound on ``E||w_{t+1} - w*||^2`` given ``E||w_t - w*||^2``."""
    limit = 1.0 / (2.0 * params.mu)
    if eta_t < 0 or eta_t > limit * (1 + 1e-12):
        raise ValueError(f"eta_t={eta_t} outside [0, 1/(2 mu)] = [0, {limit}]")
    return (1.0 - 2.0 * params.mu * eta_t) * prev_err_sq + eta_t ** 2 * params.B


def theorem1_bound(t, params: BoundParams):
    """``L/(2(t+gamma)) * [4B/mu^2 + (1+gamma)||w0-w*||^2]``; accepts scalars or arrays."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 1):
        raise ValueError("round index t must be >= 1")
    scale = 4.0 * params.B / params.mu ** 2 + (1.0 + params.gamma) * params.w0_dist_sq
    out = params.lip / (2.0 * (t_arr + params.gamma)) * scale
    return float(out) if out.ndim == 0 else out


def learning_rate(t: float, mu: float, gamma: float) -> float:
    """Decaying step size ``2 / (mu (t + gamma))``. See :func:`lr_admissible`."""
    return 2.0 / (mu * (t + gamma))


def lr_admissible(eta: float, mu: float) -> bool:
    """Whether ``eta <= 1/(2 mu)``, the step-size condition of the one-step bound."""
    return eta <= (1.0 + 1e-12) / (2.0 * mu)


def aggregation_error_closed_form(X: np.ndarray, M: int, snr: float) -> float:
    """``||X||_F^2 (K + 1/snr) / M``: the simplified per-round error scale used by the B factor.

    ``X`` holds the ``K x d`` differentials. Divide by ``K^2`` to compare with
    the distance between received and error-free averages.
    """
    X = np.asarray(X, dtype=float)
    return float(np.sum(X ** 2)) * (X.shape[0] + 1.0 / snr) / M


def ro_aggregation_error(X: np.ndarray, M: int, snr: float) -> float:
    """Expected ``||est - sum_k x_k||^2`` of the projection receiver with a perfect sum channel.

    Averages over Rayleigh channels and noise for fixed differentials ``X``
    (``K x d``) sent with one common power normalization:
    ``[K ||X||_F^2 + ||sum_k x_k||^2] / (2M) + ||X||_F^2 / (2 snr)``.
    Interference comes from the real part of ``h_s^H h_k - 1``; the noise
    term is ``Re(h_s^H n)`` with ``E||h_s||^2 = K``, rescaled by the
    normalization.
    """
    X = np.asarray(X, dtype=float)
    K = X.shape[0]
    energy = float(np.sum(X ** 2))
    coherent = float(np.sum(X.sum(axis=0) ** 2))
    return (K * energy + coherent) / (2.0 * M) + energy / (2.0 * snr)
